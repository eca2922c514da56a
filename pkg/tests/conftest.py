"""
Shared pytest fixtures for the pipeline tests.
Acceptance tests are deselected by default; run them with: pytest -m acceptance
"""
import os
import sys

import numpy as np
import pytest

# Ensure src package is importable
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.config_manager import TrainConfig  # noqa: E402
from src.datasets import SynthSpec, generate_synth  # noqa: E402


def _brute_force_retrieval(embeddings, labels, ks):
    """Leave-one-out metrics by explicit per-query sorting: (MAP@R, RP, P@1, {k: Recall@k})."""
    n = len(labels)
    maps, rps, p1s = [], [], []
    recalls = {k: [] for k in ks}
    for q in range(n):
        others = [i for i in range(n) if i != q]
        ranked = sorted(others, key=lambda i: (-float(embeddings[i] @ embeddings[q]), i))
        r = sum(1 for i in others if labels[i] == labels[q])
        if r == 0:
            continue
        hits = [labels[i] == labels[q] for i in ranked]
        precision_sum = 0.0
        found = 0
        for pos in range(r):
            if hits[pos]:
                found += 1
                precision_sum += found / (pos + 1)
        maps.append(precision_sum / r)
        rps.append(sum(hits[:r]) / r)
        p1s.append(float(hits[0]))
        for k in ks:
            recalls[k].append(float(any(hits[:k])))
    return (np.mean(maps), np.mean(rps), np.mean(p1s),
            {k: np.mean(v) for k, v in recalls.items()})


@pytest.fixture
def brute_force_retrieval():
    """Reference retrieval metrics computed without the vectorized index."""
    return _brute_force_retrieval


@pytest.fixture
def rng():
    """Seeded generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def small_bench():
    """Tiny seen/unseen benchmark: 4 seen, 2 unseen classes, 6 samples each, dim 6."""
    return generate_synth(SynthSpec(seen_classes=4, unseen_classes=2, samples_per_class=6,
                                    dim=6, center_separation=6.0, seed=0))


@pytest.fixture
def fast_config():
    """Config small enough for unit tests to train in well under a second."""
    return TrainConfig(
        epochs_teacher=2,
        epochs_student=2,
        batch_size=8,
        clusters=3,
        kmeans_max_iter=20,
        kmeans_restarts=2,
        basis_warmup_iters=4,
        hidden_dims=8,
        embedding_dim=4,
        learning_rate=0.05,
        seed=3,
    )


@pytest.fixture
def config_file(tmp_path, fast_config):
    """Path to a config file holding ``fast_config``."""
    from src.config_manager import dump_config
    p = tmp_path / 'run.cfg'
    p.write_text(dump_config(fast_config))
    return str(p)


@pytest.fixture
def bench_dir(tmp_path, small_bench):
    """Directory with the small benchmark written as data files."""
    from src.datasets import write_dataset, write_truth
    out = tmp_path / 'bench'
    out.mkdir()
    write_dataset(small_bench.labeled, str(out / 'labeled.data'))
    write_dataset(small_bench.unlabeled, str(out / 'unlabeled.data'))
    write_truth(small_bench.unlabeled_truth, str(out / 'unlabeled.truth'))
    write_dataset(small_bench.test, str(out / 'test.data'))
    return out
