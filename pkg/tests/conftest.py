from __future__ import annotations

import pytest

from wifislam import simworld


@pytest.fixture(scope="session")
def dataset_cache():
    """Memoized preset datasets; acceptance and unit tests share generations."""
    cache: dict = {}
    presets = simworld.preset_worlds()

    def get(name: str, seed: int, config=None):
        key = (name, seed, id(config) if config is not None else None)
        if key not in cache:
            cache[key] = simworld.synthesize(config if config is not None else presets[name], seed)
        return cache[key]

    return get


@pytest.fixture()
def tiny_world():
    """A small, fast square world for pipeline-level unit tests."""
    return simworld.WorldConfig(
        name="tiny",
        trajectory=simworld.TrajectorySpec(shape="square_loop", scale=10.0, laps=2.0, pause_every=3.5),
        template_of={0: 0, 1: 1, 2: 2, 3: 3},
        ap_count=16,
        tx_power_at_1m=-35.0,
        propagation=simworld.PropagationParams(
            path_loss_exponent=3.4, wall_loss_db=7.0, noise_sigma_db=2.0, visibility_floor_dbm=-85.0
        ),
        extra_walls=tuple(),
    )
