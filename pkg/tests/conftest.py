import itertools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowtoll.game_core import LatencyFn, RoutingInstance  # noqa: E402
from flowtoll.io import builtin_instance, generate_instance  # noqa: E402
from flowtoll.oracles import player_path_sets  # noqa: E402


def enumerable_corpus(count=50, max_paths=20):
    """Small generated instances, n in 2..4, at most ``max_paths`` paths per player."""
    shapes = itertools.cycle([
        ("parallel-links", 2, "pigou"),
        ("parallel-links", 3, "affine"),
        ("grid", 8, "affine"),
        ("layered-DAG", 8, "mixed"),
        ("parallel-links", 4, "monomial"),
        ("layered-DAG", 6, "affine"),
        ("grid", 8, "monomial"),
    ])
    out = []
    seed = 0
    while len(out) < count:
        kind, m, fam = next(shapes)
        inst = generate_instance(kind, 2 + seed % 3, m, fam, seed)
        seed += 1
        if max(len(p) for p in player_path_sets(inst)) <= max_paths:
            out.append(inst)
    return out


@pytest.fixture
def pigou2():
    return builtin_instance("pigou2")


@pytest.fixture
def pigou3():
    return builtin_instance("pigou3")


@pytest.fixture
def single_edge():
    return RoutingInstance(("s", "t"), (("s", "t"),), (LatencyFn.affine(1.0, 0.0),), (("s", "t"),))


@pytest.fixture
def diamond():
    # s -> a -> t, s -> b -> t, plus a -> b shortcut
    lat = LatencyFn.affine
    return RoutingInstance(
        ("s", "a", "b", "t"),
        (("s", "a"), ("s", "b"), ("a", "t"), ("b", "t"), ("a", "b")),
        (lat(1.0, 0.0), lat(0.5, 1.0), lat(0.5, 1.0), lat(1.0, 0.0), lat(0.2, 0.0)),
        (("s", "t"), ("s", "t"), ("a", "t")),
    )


@pytest.fixture(scope="session")
def corpus():
    return enumerable_corpus()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
