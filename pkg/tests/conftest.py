"""Shared fixtures: a descriptor for fast end-to-end runs on a one-block
model, sized so a full train-eval cycle takes seconds."""

import pytest

from deskssl.config import load_config

TINY_RUN_OVERRIDES = {
    "model.image_size": "8",
    "model.patch_size": "4",
    "model.embed_dim": "16",
    "model.depth": "1",
    "model.num_heads": "2",
    "model.head_hidden_dim": "32",
    "model.head_bottleneck_dim": "8",
    "model.num_prototypes": "16",
    "aug.global_size": "8",
    "aug.local_size": "4",
    "aug.resize_to": "10",
    "aug.n_local": "2",
    "data.n_samples": "32",
    "data.val_samples": "16",
    "data.image_size": "10",
    "data.probe_train_samples": "32",
    "train.batch_size": "4",
    "train.total_steps": "6",
    "train.warmup_steps": "1",
    "train.tau_t_warmup_steps": "2",
    "eval.n_points": "2",
    "eval.knn_k": "5",
    "eval.invariance_images": "6",
    "eval.invariance_views": "3",
}


def tiny_run_config(out: str, run_id: str = "tiny", **extra):
    overrides = dict(TINY_RUN_OVERRIDES)
    overrides.update({"run.id": run_id, "run.out": out})
    overrides.update({k: str(v) for k, v in extra.items()})
    return load_config(None, overrides)


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_run_config(str(tmp_path))
