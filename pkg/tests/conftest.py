import sys

import numpy as np
import pytest

from kacnet.model import KacModel, ModelConfig, Sample
from kacnet.records import ProposalSet, Query


def random_proposal_set(rng, n, d_v=5, k=3, image_id="img", size=(100.0, 80.0)):
    w, h = size
    boxes = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, w / 2), rng.uniform(0, h / 2)
        boxes.append([x1, y1, x1 + rng.uniform(2, w / 2), y1 + rng.uniform(2, h / 2)])
    probs = rng.random((n, k)) + 1e-3
    probs /= probs.sum(axis=1, keepdims=True)
    return ProposalSet(image_id, w, h, rng.normal(size=d_v), boxes, rng.normal(size=(n, d_v)), probs)


def random_sample(rng, n, t, vocab_size, d_v=5, name="q"):
    ps = random_proposal_set(rng, n, d_v, image_id=f"img-{name}")
    ids = [int(v) for v in rng.integers(3, vocab_size, t)]
    query = Query(name, ps.image_id, ["w"] * t)
    return Sample(query, ps, ids, rng.normal(size=n), rng.random(n), rng.random(n) + 0.05)


def small_model(seed=0, vocab_size=7, d_v=5, embed_dim=4, d=6, m=5, rescale=None):
    model = KacModel(ModelConfig(vocab_size=vocab_size, d_v=d_v, embed_dim=embed_dim, d_q=d, d_r=d, m=m, seed=seed))
    if rescale is not None:
        rng = np.random.default_rng(seed + 1000)
        for name, p in model.parameters():
            p.data[...] = rng.normal(0.0, 1.0 if name == "embedding" else rescale, p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.LINES:
        return
    terminalreporter.write_sep("=", "acceptance")
    for number in sorted(acceptance.LINES):
        terminalreporter.write_line(acceptance.LINES[number])
