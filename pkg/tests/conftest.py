"""Shared fixtures: the expensive trained artifacts, cached on disk.

Training the regressor and calibrating stats take minutes; they are fully
deterministic for a given seed, so the first test session materializes them
under tests/.cache/ and later sessions just load. Delete the directory to
force a retrain.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

GEN_SEED = 0
REG_SEED = 0
CAL_SEED = 0
ENC_SEED = 0
CORPUS_SEED = 7
CORPUS_SIZE = 256
CACHE_DIR = Path(__file__).parent / ".cache"


def cache_path(name: str) -> Path:
    CACHE_DIR.mkdir(exist_ok=True)
    return CACHE_DIR / name


def cached_json(name: str, build):
    """Build-once JSON payloads (reports, timings) shared across sessions."""
    path = cache_path(name)
    if path.exists():
        return json.loads(path.read_text())
    payload = build()
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return payload


@pytest.fixture(scope="session")
def generator():
    from latentpose.toygen import ToyGenerator

    return ToyGenerator(seed=GEN_SEED)


@pytest.fixture(scope="session")
def regressor_bundle(generator):
    from latentpose.estimator import PoseRegressor, train_regressor

    ckpt = cache_path(f"regressor-seed{REG_SEED}.ckpt")
    report_file = cache_path(f"regressor-seed{REG_SEED}.json")
    if ckpt.exists() and report_file.exists():
        return PoseRegressor.load(ckpt), json.loads(report_file.read_text())
    reg, report = train_regressor(generator, seed=REG_SEED)
    reg.save(ckpt)
    report_file.write_text(json.dumps(report, indent=1, sort_keys=True))
    return reg, report


@pytest.fixture(scope="session")
def trained_regressor(regressor_bundle):
    return regressor_bundle[0]


@pytest.fixture(scope="session")
def regressor_report(regressor_bundle):
    return regressor_bundle[1]


@pytest.fixture(scope="session")
def embedder():
    from latentpose.estimator import FrozenEmbedder

    return FrozenEmbedder(seed=0)


@pytest.fixture(scope="session")
def pose_stats(generator, trained_regressor):
    from latentpose.directions import estimate_p_stats, load_pose_stats, save_pose_stats

    path = cache_path(f"stats-seed{CAL_SEED}.ckpt")
    if path.exists():
        return load_pose_stats(path)
    stats = estimate_p_stats(generator, trained_regressor, n=10000, seed=CAL_SEED)
    save_pose_stats(stats, path)
    return stats


@pytest.fixture(scope="session")
def real_corpus(generator):
    from latentpose.inversion import build_real_corpus

    return build_real_corpus(generator, CORPUS_SIZE, seed=CORPUS_SEED)


@pytest.fixture(scope="session")
def encoder_bundle(generator, real_corpus):
    from latentpose.inversion import Encoder, train_encoder

    ckpt = cache_path(f"encoder-seed{ENC_SEED}.ckpt")
    report_file = cache_path(f"encoder-seed{ENC_SEED}.json")
    if ckpt.exists() and report_file.exists():
        return Encoder.load(ckpt), json.loads(report_file.read_text())
    enc, report = train_encoder(generator, real_corpus, seed=ENC_SEED)
    enc.save(ckpt)
    report_file.write_text(json.dumps(report, indent=1, sort_keys=True))
    return enc, report


@pytest.fixture(scope="session")
def trained_encoder(encoder_bundle):
    return encoder_bundle[0]


@pytest.fixture(scope="session")
def encoder_report(encoder_bundle):
    return encoder_bundle[1]


@pytest.fixture(scope="session")
def oracle_matrix(generator, pose_stats):
    from latentpose.directions import DirectionMatrix, oracle_direction_matrix

    return DirectionMatrix.from_matrix(
        oracle_direction_matrix(generator, pose_stats), pose_stats
    )
