"""Trained toy model shared by the slower tests.

Training takes a couple of minutes on one core, so the checkpoint is kept in
pytest's cache directory (or wherever ``FRDIFF_TEST_CHECKPOINT`` points).
"""
import os
from pathlib import Path

from frdiff.data import shapes_corpus
from frdiff.io import load_checkpoint, save_checkpoint
from frdiff.network import build_toy_network, network_from_checkpoint
from frdiff.schedule import NoiseSchedule
from frdiff.training import train_toy

RECIPE = {"arch": "toy_dit", "width": 32, "depth": 4, "seed": 0, "steps": 3000, "lr": 2e-3, "batch": 64}


def trained_toy_dit(cache_dir: Path):
    path = Path(os.environ.get("FRDIFF_TEST_CHECKPOINT", cache_dir / "toy_dit_w32_s3000"))
    if not (path / "manifest.json").exists():
        r = RECIPE
        net = build_toy_network(r["arch"], r["width"], r["depth"], r["seed"])
        net, _ = train_toy(net, shapes_corpus(), NoiseSchedule.linear(), r["steps"], r["lr"], r["batch"], r["seed"])
        save_checkpoint(path, net.param_arrays(), net.config)
    return network_from_checkpoint(*load_checkpoint(path))
