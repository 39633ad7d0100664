from __future__ import annotations

import dataclasses

import pytest

from tilesim.arch import ArchConfig, HbmSpec, NocSpec


@pytest.fixture(scope="session")
def arch() -> ArchConfig:
    """Reference 32x32 chip with default tile/NoC/HBM parameters."""
    return ArchConfig()


@pytest.fixture(scope="session")
def small_arch() -> ArchConfig:
    """4x4 mesh for fast functional runs; same per-tile resources."""
    base = ArchConfig()
    return dataclasses.replace(
        base,
        noc=dataclasses.replace(base.noc, mesh_x=4, mesh_y=4),
        hbm=dataclasses.replace(base.hbm, num_channels=4),
    )


def mesh(x: int, y: int, channels: int | None = None) -> ArchConfig:
    base = ArchConfig()
    return dataclasses.replace(
        base,
        noc=dataclasses.replace(base.noc, mesh_x=x, mesh_y=y),
        hbm=dataclasses.replace(base.hbm, num_channels=channels or min(x, 32)),
    )


def wafer_chip() -> ArchConfig:
    """Per-die configuration used by the multi-die serving tests."""
    from tilesim.arch import HbmSpec, TileSpec

    return ArchConfig(
        tile=TileSpec(l1_capacity=393216),
        hbm=HbmSpec(num_channels=64, channel_bytes_per_cycle=32.895,
                    capacity_bytes=137438953472),
        frequency=1.9e9,
        dtype_bytes=1,
    )
