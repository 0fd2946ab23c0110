"""Shared fixtures: one desk-scale pipeline (corpus, trained GE, three users)
built once per session, plus a small corpus and config for CLI runs."""

import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

from expertmix import checkpoint
from expertmix.data import (
    balance_classes,
    generate_corpus,
    gn_mixture,
    make_profile,
    split_validation,
    subseed,
    synthesize_user,
    write_idx,
)
from expertmix.moe import MoeModel
from expertmix.networks import Network, build_gn, build_le
from expertmix.training import TrainConfig, accuracy, evaluate_components, train_ge, train_gn, train_le

SEED = 7
CORPUS_SEED = 99


def head_config(name: str, seed_root: int = SEED) -> TrainConfig:
    return TrainConfig(
        learning_rate=0.05, epochs=60, seed=subseed(seed_root, name), early_stop_patience=10
    )


def ge_config(epochs: int = 10, seed_root: int = SEED) -> TrainConfig:
    return TrainConfig(
        learning_rate=0.02, epochs=epochs, seed=subseed(seed_root, "ge"), early_stop_patience=3
    )


@pytest.fixture(scope="session")
def desk():
    """Desk-scale end-to-end state: 10-class corpus, frozen GE, 3 users."""
    t0 = time.perf_counter()
    train, test = generate_corpus(10, 220, 45, seed=CORPUS_SEED)
    balanced = balance_classes(train, subseed(SEED, "balance"))
    ge_pool, user_pool = split_validation(balanced, 0.25, subseed(SEED, "user_pool"))

    ge, ge_report = train_ge(ge_pool, ge_config())
    ge_digest_after_step1 = checkpoint.params_digest(ge.param_list())
    ge_generic_acc = accuracy(ge, test)

    users = {}
    for uid in (1, 2, 3):
        profile = make_profile(uid, SEED)
        user_train, user_test = synthesize_user(user_pool, profile, 30, 10)
        le = Network.build(build_le(3, 10), seed=subseed(SEED, f"user.{uid}.le.init"))
        le_report = train_le(ge, le, user_train, head_config(f"user.{uid}.le"))
        mixture = gn_mixture(user_train, ge_pool, subseed(SEED, f"user.{uid}.gn.mixture"))
        gn = Network.build(build_gn(3), seed=subseed(SEED, f"user.{uid}.gn.init"))
        gn_report = train_gn(ge, gn, mixture, head_config(f"user.{uid}.gn"))
        moe = MoeModel.assemble(ge, le, gn)
        metrics = evaluate_components(moe, user_test, test)
        users[uid] = SimpleNamespace(
            profile=profile,
            train=user_train,
            test=user_test,
            le=le,
            gn=gn,
            moe=moe,
            metrics=metrics,
            le_report=le_report,
            gn_report=gn_report,
            mixture=mixture,
        )

    return SimpleNamespace(
        train=train,
        test=test,
        ge_pool=ge_pool,
        user_pool=user_pool,
        ge=ge,
        ge_report=ge_report,
        ge_digest_after_step1=ge_digest_after_step1,
        ge_generic_acc=ge_generic_acc,
        users=users,
        build_seconds=time.perf_counter() - t0,
    )


SMALL_CONFIG = """\
# small corpus configuration for command-line runs
seed = 11
classes = 10
users = 2
data.train_images = {data}/train-images.idx
data.train_labels = {data}/train-labels.idx
data.test_images = {data}/test-images.idx
data.test_labels = {data}/test-labels.idx
data.user_pool_fraction = 0.25
ge.learning_rate = 0.02
ge.epochs = 3
ge.patience = 2
user.train_per_class = 8
user.test_per_class = 4
head.epochs = 40
head.patience = 8
sweep.candidates = 4,2
"""


@pytest.fixture(scope="session")
def cli_env(tmp_path_factory):
    """Small IDX corpus on disk plus a config file pointing at it."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    data_dir.mkdir()
    train, test = generate_corpus(10, 60, 20, seed=123)
    write_idx(train, data_dir / "train-images.idx", data_dir / "train-labels.idx")
    write_idx(test, data_dir / "test-images.idx", data_dir / "test-labels.idx")
    config = root / "experiment.cfg"
    config.write_text(SMALL_CONFIG.format(data=data_dir))
    return SimpleNamespace(root=root, data_dir=data_dir, config=config)


@pytest.fixture(scope="session")
def cli_run(cli_env):
    """One completed train-ge + customize run used by several tests."""
    from expertmix.cli import main

    out = cli_env.root / "run_main"
    assert main(["train-ge", "--config", str(cli_env.config), "--out", str(out)]) == 0
    assert main(["customize", "--config", str(cli_env.config), "--out", str(out)]) == 0
    return SimpleNamespace(out=out, env=cli_env)
