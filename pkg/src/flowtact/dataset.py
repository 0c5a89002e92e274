"""Bit-exact demonstration storage.

A dataset is a directory holding ``manifest.json`` plus one binary file per
trajectory. Trajectory layout (all little-endian):

    magic "FBI1"
    u32 x 5: T, N_s, N_p, N_k, d_a
    f32 arrays in order: states [T, N_s], clouds [T, N_p, 3],
        tactile [T, N_k], flows [T, N_p, 3], actions [T, d_a]
    u32: goal cloud point count n
    f32 goal cloud [n, 3]
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FBI1"
MANIFEST_NAME = "manifest.json"
DATASET_VERSION = 1


@dataclass
class Trajectory:
    states: np.ndarray  # (T, N_s) f32
    clouds: np.ndarray  # (T, N_p, 3) f32
    tactile: np.ndarray  # (T, N_k) f32
    flows: np.ndarray  # (T, N_p, 3) f32
    actions: np.ndarray  # (T, d_a) f32
    goal_cloud: np.ndarray  # (n, 3) f32

    def __len__(self) -> int:
        return int(self.states.shape[0])


def write_trajectory(path, traj: Trajectory) -> None:
    t, n_s = traj.states.shape
    n_p = traj.clouds.shape[1]
    n_k = traj.tactile.shape[1]
    d_a = traj.actions.shape[1]
    if traj.clouds.shape != (t, n_p, 3) or traj.flows.shape != (t, n_p, 3):
        raise ValueError("cloud/flow shapes inconsistent with T and N_p")
    if traj.tactile.shape != (t, n_k) or traj.actions.shape != (t, d_a):
        raise ValueError("tactile/action shapes inconsistent with T")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", t, n_s, n_p, n_k, d_a))
        for arr in (traj.states, traj.clouds, traj.tactile, traj.flows, traj.actions):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        goal = np.ascontiguousarray(traj.goal_cloud, dtype="<f4")
        fh.write(struct.pack("<I", goal.shape[0]))
        fh.write(goal.tobytes())


def read_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path} is not a trajectory file")
        t, n_s, n_p, n_k, d_a = struct.unpack("<5I", fh.read(20))

        def arr(shape):
            count = int(np.prod(shape))
            return np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape).copy()

        states = arr((t, n_s))
        clouds = arr((t, n_p, 3))
        tactile = arr((t, n_k))
        flows = arr((t, n_p, 3))
        actions = arr((t, d_a))
        (n_goal,) = struct.unpack("<I", fh.read(4))
        goal = arr((n_goal, 3))
        trailing = fh.read()
        if trailing:
            raise ValueError(f"{path} has {len(trailing)} unexpected trailing bytes")
    return Trajectory(states, clouds, tactile, flows, actions, goal)


def traj_filename(index: int) -> str:
    return f"traj_{index:05d}.bin"


def write_manifest(directory, task: str, n_traj: int, n_s: int, n_p: int, n_k: int, d_a: int, seed: int) -> None:
    doc = {
        "version": DATASET_VERSION,
        "task": task,
        "n_traj": n_traj,
        "N_s": n_s,
        "N_p": n_p,
        "N_k": n_k,
        "d_a": d_a,
        "seed": seed,
    }
    with open(Path(directory) / MANIFEST_NAME, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_manifest(directory) -> dict:
    with open(Path(directory) / MANIFEST_NAME) as fh:
        doc = json.load(fh)
    if doc.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {doc.get('version')}")
    return doc


def load_dataset(directory) -> tuple[dict, list[Trajectory]]:
    manifest = read_manifest(directory)
    trajectories = [
        read_trajectory(Path(directory) / traj_filename(i)) for i in range(manifest["n_traj"])
    ]
    for traj in trajectories:
        if traj.states.shape[1] != manifest["N_s"] or traj.clouds.shape[1] != manifest["N_p"]:
            raise ValueError("trajectory shapes disagree with the manifest")
    return manifest, trajectories
