"""Shared fixtures: phantom sets and a small trained checkpoint."""

from __future__ import annotations

import pytest

from dosegraph.bundles import save_bundle
from dosegraph.model import (
    DoseGnnConfig,
    graph_for_case,
    save_checkpoint,
    train_dose_gnn,
    train_mlp_baseline,
)
from dosegraph.phantoms import generate_phantom_set


@pytest.fixture(scope="session")
def small_config():
    """Cheap but structurally complete config for training-backed tests."""
    return DoseGnnConfig(
        hidden_width=16,
        ffn_hidden=24,
        learning_rates=(1e-2,),
        max_epochs=6,
        seed=11,
    )


@pytest.fixture(scope="session")
def phantom_cases():
    return generate_phantom_set(6, seed=404)


@pytest.fixture(scope="session")
def phantom_graphs(phantom_cases, small_config):
    return [graph_for_case(case, small_config) for case in phantom_cases]


@pytest.fixture(scope="session")
def gnn_result(phantom_graphs, small_config):
    return train_dose_gnn(phantom_graphs[:4], small_config)


@pytest.fixture(scope="session")
def mlp_result(phantom_graphs, small_config):
    return train_mlp_baseline(phantom_graphs[:4], small_config)


@pytest.fixture(scope="session")
def gnn_checkpoint(tmp_path_factory, gnn_result):
    path = tmp_path_factory.mktemp("checkpoint") / "gnn.dgp"
    save_checkpoint(path, gnn_result)
    return path


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory, phantom_cases):
    directory = tmp_path_factory.mktemp("bundles")
    for case in phantom_cases:
        save_bundle(case, directory / f"{case.case_id}.dgb")
    return directory
