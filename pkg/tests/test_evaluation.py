import itertools

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings, strategies as st

from coemogen.encoders import build_toy_encoders
from coemogen.errors import EvalError
from coemogen.evaluation import (EvalReport, centroid_spread, emo_accuracy, evaluate, fidelity_distance,
                                 frechet_distance, pairwise_diversity, pixel_distance, semantic_clarity,
                                 semantic_diversity)
from coemogen.taxonomy import Emotion


class Stub:
    def __init__(self, fn):
        self.fn = fn

    def predict_tensor(self, images):
        return np.asarray([self.fn(i) for i in range(len(images))])


def imgs(n, seed=0):
    return torch.rand(n, 3, 8, 8, generator=torch.Generator().manual_seed(seed)) * 2 - 1


class IdentityImageEncoder(torch.nn.Module):
    """Flattened first channel row as the embedding; lets tests place embeddings directly."""

    def forward(self, x):
        return x[:, 0, 0, :].double()


class TableTextEncoder:
    def __init__(self, table):
        self.table = table

    def encode_text(self, words):
        from coemogen.encoders import TextEncoding

        pooled = torch.stack([self.table[w] for w in words])
        return TextEncoding(sequence=pooled.unsqueeze(1), pooled=pooled)


def embed_images(vectors):
    x = torch.zeros(len(vectors), 3, 1, len(vectors[0]), dtype=torch.float64)
    x[:, 0, 0, :] = torch.tensor(np.asarray(vectors), dtype=torch.float64)
    return x


# -- Emo-A ---------------------------------------------------------------------------

def test_emo_accuracy_examples():
    labels = [Emotion.AWE, Emotion.FEAR, Emotion.SADNESS, Emotion.ANGER]
    x = imgs(4)
    assert emo_accuracy(x, labels, Stub(lambda i: int(labels[i]))) == 1.0
    assert emo_accuracy(x, labels, Stub(lambda i: int(Emotion.DISGUST))) == 0.0
    assert emo_accuracy(x, labels, Stub(lambda i: int(labels[i]) if i < 3 else 0)) == 0.75
    with pytest.raises(EvalError):
        emo_accuracy(x, labels[:3], Stub(lambda i: 0))


# -- Sem-C ---------------------------------------------------------------------------

def test_semantic_clarity_examples():
    table = {"sky": torch.tensor([1.0, 0.0, 0.0]), "sea": torch.tensor([0.0, 1.0, 0.0])}
    te = TableTextEncoder(table)
    enc = IdentityImageEncoder()
    assert semantic_clarity(embed_images([[1.0, 0.0, 0.0]]), ["sky", "sea"], enc, te) == pytest.approx(1.0)
    assert semantic_clarity(embed_images([[0.0, 0.0, 2.0]]), ["sky", "sea"], enc, te) == pytest.approx(0.0)
    with pytest.raises(EvalError):
        semantic_clarity(embed_images([[1.0, 0.0, 0.0]]), [], enc, te)


def test_semantic_clarity_brute_force():
    g = np.random.default_rng(0)
    vecs, words = g.normal(size=(3, 5)), {f"w{i}": torch.tensor(g.normal(size=5)) for i in range(4)}
    got = semantic_clarity(embed_images(vecs), list(words), IdentityImageEncoder(), TableTextEncoder(words))
    best = []
    for v in vecs:
        best.append(max(float(v @ w.numpy() / np.linalg.norm(v) / np.linalg.norm(w.numpy())) for w in words.values()))
    assert got == pytest.approx(np.mean(best), abs=1e-6)
    assert -1 <= got <= 1


# -- Sem-D ---------------------------------------------------------------------------

def test_sem_d_identical_is_zero():
    x = np.ones((6, 3))
    assert semantic_diversity({"awe": x}, k=3, embeddings=True) == pytest.approx(0.0, abs=1e-12)


def test_sem_d_two_blobs():
    g = np.random.default_rng(1)
    a = g.normal([0, 0, 0], 0.01, (20, 3))
    b = g.normal([4, 3, 0], 0.01, (20, 3))
    got = semantic_diversity({"awe": np.vstack([a, b])}, k=2, embeddings=True)
    assert got == pytest.approx(5.0, rel=0.05)


@given(st.permutations(list(range(15))))
@settings(max_examples=15, deadline=None)
def test_sem_d_permutation_invariant(order):
    x = np.random.default_rng(2).normal(size=(15, 4))
    assert centroid_spread(x[list(order)], 3, seed=0) == centroid_spread(x, 3, seed=0)


def test_sem_d_needs_k_images():
    with pytest.raises(EvalError):
        semantic_diversity({"awe": np.zeros((2, 3))}, k=3, embeddings=True)


def test_sem_d_averages_emotions():
    g = np.random.default_rng(3)
    a, b = g.normal(size=(10, 2)), 3 * g.normal(size=(10, 2))
    both = semantic_diversity({"awe": a, "fear": b}, k=3, embeddings=True)
    assert both == pytest.approx((centroid_spread(a, 3) + centroid_spread(b, 3)) / 2)


# -- diversity -----------------------------------------------------------------------

def test_pairwise_diversity_examples():
    one = imgs(1)[0]
    assert pairwise_diversity([one, one.clone()]) == 0.0
    black, white = -torch.ones(3, 4, 4), torch.ones(3, 4, 4)
    assert pairwise_diversity([black, white]) == pytest.approx(1.0)
    x = imgs(4, seed=5)
    brute = np.mean([pixel_distance(x[i], x[j]) for i, j in itertools.combinations(range(4), 2)])
    assert abs(pairwise_diversity(x) - brute) < 1e-9
    with pytest.raises(EvalError):
        pairwise_diversity(x[:1])


@given(st.permutations(list(range(5))))
@settings(max_examples=10, deadline=None)
def test_pairwise_permutation_invariant(order):
    x = imgs(5, seed=6)
    assert pairwise_diversity(x[list(order)]) == pytest.approx(pairwise_diversity(x), abs=1e-12)


# -- fidelity ------------------------------------------------------------------------

def oracle_frechet(x, y, eps=1e-6):
    mu1, mu2 = x.mean(0), y.mean(0)
    s1 = np.cov(x, rowvar=False) + eps * np.eye(x.shape[1])
    s2 = np.cov(y, rowvar=False) + eps * np.eye(x.shape[1])
    covmean = scipy.linalg.sqrtm(s1 @ s2).real
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1 + s2 - 2 * covmean))


def test_frechet_self_is_zero():
    x = np.random.default_rng(4).normal(size=(40, 6))
    assert frechet_distance(x, x) < 1e-6


def test_frechet_mean_offset():
    x = np.random.default_rng(5).normal(size=(200, 4))
    m = np.array([1.0, -2.0, 0.5, 0.0])
    assert frechet_distance(x, x + m) == pytest.approx(float(m @ m), abs=1e-5)


def test_frechet_matches_oracle():
    g = np.random.default_rng(6)
    x, y = g.normal(size=(30, 5)), 2 * g.normal(size=(25, 5)) + 1
    assert frechet_distance(x, y) == pytest.approx(oracle_frechet(x, y), abs=1e-5)


def test_frechet_degenerate_covariance():
    x = np.random.default_rng(7).normal(size=(3, 10))  # rank-deficient
    d = frechet_distance(x, x[::-1] + 0.1)
    assert np.isfinite(d) and d >= 0


def test_frechet_errors():
    with pytest.raises(EvalError):
        frechet_distance(np.zeros((1, 3)), np.zeros((4, 3)))


def test_fidelity_with_toy_encoder():
    image_enc, _ = build_toy_encoders()
    x = imgs(6, seed=8)
    x = torch.nn.functional.interpolate(x, size=32)
    assert fidelity_distance(x, x, image_enc) < 1e-6


# -- report --------------------------------------------------------------------------

def test_evaluate_report_aggregates_and_reproduces():
    image_enc, text_enc = build_toy_encoders()
    gen = {e: torch.nn.functional.interpolate(imgs(6, seed=int(e)), size=32) for e in (Emotion.AWE, Emotion.FEAR)}
    ref = {e: torch.nn.functional.interpolate(imgs(6, seed=10 + int(e)), size=32) for e in gen}
    clf = Stub(lambda i: int(Emotion.AWE))
    kwargs = dict(classifier=clf, image_encoder=image_enc, text_encoder=text_enc, vocabulary=["sky", "dark"], k=2)
    rep = evaluate(gen, ref, **kwargs, metadata={"run": 1})
    assert rep.emo_a == pytest.approx(0.5)
    for metric in ("fidelity", "diversity", "emo_a", "sem_c", "sem_d"):
        assert getattr(rep, metric) == pytest.approx(np.mean([row[metric] for row in rep.per_emotion.values()]))
        assert np.isfinite(getattr(rep, metric))
    again = evaluate(gen, ref, **kwargs, metadata={"run": 1})
    assert again.to_text() == rep.to_text() and again.to_json() == rep.to_json()
    text = rep.to_text()
    assert "emo_a = 0.500000" in text and "awe\t" in text and "FID" in rep.table_row()
    with pytest.raises(EvalError):
        evaluate(gen, {}, **kwargs)


def test_report_json_round_trip():
    import json

    rep = EvalReport(1.0, 0.5, 0.75, 0.2, 0.1, {"awe": {"fidelity": 1.0}}, "abc")
    assert EvalReport(**json.loads(rep.to_json())) == rep
