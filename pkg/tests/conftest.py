"""Shared fixtures.

Two stacks built from the same recipe at different sizes: ``tiny`` keeps
unit and integration tests fast; ``desk`` is the larger build the
acceptance trends run on.  Both are session scoped and immutable by
convention (tests that need a mutated pipeline copy it).
"""

import time

import numpy as np
import pytest

from advshield import nn
from advshield.arch import DEFAULT_ARCH, build_network, parse_arch
from advshield.attacks import generate, parse_attack
from advshield.data import make_digits, split
from advshield.latent import build_chain
from advshield.pipeline import DetectionPipeline
from advshield.sparse import (InputDefender, PatchConfig,
                              learn_class_dictionaries,
                              profile_input_defender)

TINY_ARCH = "1x28x28-4C5-MP2-30FC-10FC"


def build_stack(*, n_samples, fractions, arch, victim_epochs, chain_n,
                defender_epochs, dict_atoms, dict_iters, sample_cap,
                attacks, seed, sp=5.0):
    """Data, victim, defenders, dictionaries, calibrated pipeline."""
    t0 = time.monotonic()
    ds = make_digits(n_samples, seed=seed)
    parts = split(ds, fractions, seed=seed)
    train, profile = parts["train"], parts["profile"]

    victim = build_network(parse_arch(arch), seed=seed)
    victim, _ = nn.train(victim, train.images, train.labels,
                         nn.TrainConfig(learning_rate=0.1, batch_size=64,
                                        epochs=victim_epochs, seed=seed))

    chain = build_chain(victim, train.images, train.labels, profile.images,
                        chain_n,
                        nn.TrainConfig(learning_rate=0.01, batch_size=64,
                                       epochs=defender_epochs, seed=seed),
                        sp=sp)

    patch = PatchConfig(sample_cap=sample_cap)
    dictionaries = learn_class_dictionaries(
        train.images, train.labels, ds.num_classes, patch=patch,
        n_atoms=dict_atoms, beta=0.15, iterations=dict_iters, seed=seed)
    input_defender = InputDefender(dictionaries, sp=sp)
    profile_input_defender(input_defender, profile.images,
                           nn.predict(victim, profile.images))

    pipeline = DetectionPipeline(victim, chain, input_defender, sp=sp)
    calib = parts["calibrate"]
    configs = [parse_attack(a) for a in attacks]
    adv = np.concatenate([generate(victim, calib.images, calib.labels, c)
                          for c in configs], axis=0)
    attack_names = [c.describe() for c in configs]
    pipeline.calibrate(calib.images, adv, attack_names)

    return {"parts": parts, "victim": victim, "chain": chain,
            "input_defender": input_defender, "pipeline": pipeline,
            "calib_adv": adv, "calib_attacks": attack_names,
            "arch": arch, "seed": seed, "sp": sp,
            "build_seconds": time.monotonic() - t0}


@pytest.fixture(scope="session")
def tiny():
    return build_stack(
        n_samples=2000,
        fractions={"train": 0.5, "profile": 0.2, "calibrate": 0.2,
                   "eval": 0.1},
        arch=TINY_ARCH, victim_epochs=2, chain_n=2, defender_epochs=2,
        dict_atoms=24, dict_iters=2, sample_cap=300,
        attacks=["fgs:eps=0.1", "bim:step=0.005,iters=10"], seed=7)


@pytest.fixture(scope="session")
def desk():
    return build_stack(
        n_samples=15000,
        fractions={"train": 10 / 15, "profile": 2 / 15,
                   "calibrate": 1 / 15, "eval": 2 / 15},
        arch=DEFAULT_ARCH, victim_epochs=3, chain_n=4, defender_epochs=5,
        dict_atoms=225, dict_iters=5, sample_cap=1200,
        attacks=["fgs:eps=0.1", "bim:step=0.002,iters=50"], seed=1)
