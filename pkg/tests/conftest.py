"""Fixtures compartidos: modelos sintéticos pequeños y opciones de solver baratas."""

import numpy as np
import pytest

from dp_solver import DPOptions, SearchOptions
from lmcts_solver import KernelConfig, LMCTSOptions
from market_core import Constraints, RegimeModel, UtilitySpec


@pytest.fixture
def two_regime_model() -> RegimeModel:
    """2 regímenes x 2 activos riesgosos, escala mensual."""
    return RegimeModel(
        mu=np.array([[0.010, 0.003], [-0.012, 0.004]]),
        sigma=np.array([
            [[0.0016, 0.0001], [0.0001, 0.0004]],
            [[0.0064, -0.0004], [-0.0004, 0.0006]],
        ]),
        trans=np.array([[0.95, 0.05], [0.15, 0.85]]),
        rf=0.002,
        asset_names=("equity", "bonds"),
    )


@pytest.fixture
def single_asset_model() -> RegimeModel:
    """Un régimen, un activo, rf = 0: caso de Merton."""
    return RegimeModel(
        mu=np.array([[0.001]]),
        sigma=np.array([[[0.0009]]]),
        trans=np.array([[1.0]]),
        rf=0.0,
        asset_names=("stock",),
    )


@pytest.fixture
def crra() -> UtilitySpec:
    return UtilitySpec(kind="crra", gamma=-1.0)


@pytest.fixture
def no_short() -> Constraints:
    return Constraints()


@pytest.fixture
def fast_dp() -> DPOptions:
    return DPOptions(
        belief_step=0.25,
        mc_paths=400,
        search=SearchOptions(action_step=0.25, refine_step=None),
        seed=11,
    )


@pytest.fixture
def fast_lmcts() -> LMCTSOptions:
    return LMCTSOptions(
        iterations=40,
        batch_paths=5,
        pool_paths=60,
        belief_step=0.25,
        kernel=KernelConfig(),
        search=SearchOptions(action_step=0.25, refine_step=None),
        seed=11,
    )
