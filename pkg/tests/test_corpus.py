import io
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from coemogen.corpus import (CaptionPrompt, CorpusManifest, CorpusRecord, FileImageLoader, FixedWeightClassifier,
                             PixelEmotionClassifier, TemplateCaptioner, caption_corpus, curate_by_confidence,
                             filter_bottom_fraction, oversample, read_manifest, render_prompt, score_pairs,
                             token_frequency_report, top_tokens, write_manifest)
from coemogen.corpus.records import dumps_manifest
from coemogen.corpus.synthetic import render_batch, write_synthetic_corpus
from coemogen.errors import CurationError, DataError, TemplateError
from coemogen.taxonomy import EMOTIONS, Emotion


def rec(ref, label="awe", score=None, caption="x"):
    return CorpusRecord(ref, Emotion[label.upper()] if isinstance(label, str) else label, caption, score)


def png(value=0):
    buf = io.BytesIO()
    Image.fromarray(np.full((8, 8, 3), value, np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


# -- prompts -------------------------------------------------------------------------

def test_default_prompt():
    text = render_prompt(CaptionPrompt(), "awe")
    assert "strong emotion of awe" in text
    assert "one-sentence caption" in text


def test_prior_ablation_omits_emotion():
    assert "fear" not in render_prompt(CaptionPrompt(emotional_prior=False), "fear")


def test_detail_unconstrained_drops_sentence_limit():
    assert "one-sentence" not in render_prompt(CaptionPrompt(detail_unconstrained=True), "awe")


@given(st.sampled_from(EMOTIONS), st.booleans(), st.booleans())
def test_prompt_invariants(e, prior, free):
    text = render_prompt(CaptionPrompt(emotional_prior=prior, detail_unconstrained=free), e)
    assert (e.label in text) == prior
    assert ("one-sentence caption" in text) == (not free)
    assert text == render_prompt(CaptionPrompt(emotional_prior=prior, detail_unconstrained=free), e)


def test_unresolvable_slot():
    with pytest.raises(TemplateError):
        render_prompt(CaptionPrompt(template="{nope}"), "awe")
    with pytest.raises(TemplateError):
        render_prompt(CaptionPrompt(template="{emotion}", emotional_prior=False), "awe")


# -- captioning ----------------------------------------------------------------------

class StubCaptioner:
    def __init__(self, outputs):
        self.outputs = outputs
        self.calls = 0

    def caption(self, image, prompt):
        self.calls += 1
        out = self.outputs(image, prompt) if callable(self.outputs) else self.outputs
        if isinstance(out, Exception):
            raise out
        return out


def loader_for(refs):
    return lambda ref: png(refs.index(ref) * 40)


def test_caption_pass_through():
    out = caption_corpus([rec("a", caption="")], StubCaptioner("a dark forest path"), loader=loader_for(["a"]))
    assert out[0].caption == "a dark forest path" and out[0].ok


def test_empty_caption_flagged():
    refs = ["a", "b"]
    cap = StubCaptioner(lambda img, p: "" if img == png(0) else "ok caption")
    out = caption_corpus([rec(r, caption="") for r in refs], cap, loader=loader_for(refs), max_retries=1)
    assert not out[0].ok and out[0].status == "caption_failed" and out[0].attempts == 2
    assert out[1].caption == "ok caption"


def test_per_record_isolation():
    refs = ["r1", "r2", "r3"]
    bad = png(40)
    cap = StubCaptioner(lambda img, p: RuntimeError("boom") if img == bad else "fine")
    out = caption_corpus([rec(r, caption="") for r in refs], cap, loader=loader_for(refs))
    assert [r.ok for r in out] == [True, False, True]
    assert "boom" in out[1].error and out[1].attempts == 3


def test_whole_batch_failure():
    with pytest.raises(CurationError):
        caption_corpus([rec("a", caption="")], StubCaptioner(RuntimeError("down")), loader=loader_for(["a"]))


def test_missing_image_names_file(tmp_path):
    records = [rec("missing.png", caption=""), rec("there.png", caption="")]
    (tmp_path / "there.png").write_bytes(png(3))
    out = caption_corpus(records, StubCaptioner("c"), loader=FileImageLoader(tmp_path))
    assert not out[0].ok and "missing.png" in out[0].error
    assert out[1].ok


def test_caption_order_independent_of_jobs():
    refs = [f"r{i}" for i in range(6)]
    cap = StubCaptioner(lambda img, p: f"cap {img[-20:].hex()}")
    a = caption_corpus([rec(r, caption="") for r in refs], cap, loader=loader_for(refs), jobs=1)
    b = caption_corpus([rec(r, caption="") for r in refs], cap, loader=loader_for(refs), jobs=4)
    assert a == b


def test_template_captioner_follows_prompt():
    img = render_batch(1, 0)[0][6]
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    cap = TemplateCaptioner()
    one = cap.caption(buf.getvalue(), render_prompt(CaptionPrompt(), "fear"))
    assert one.count(".") == 1 and "fear" in one.lower() or "fearful" in one.lower()
    free = cap.caption(buf.getvalue(), render_prompt(CaptionPrompt(detail_unconstrained=True, emotional_prior=False), "fear"))
    assert free.count(".") >= 2


# -- scoring -------------------------------------------------------------------------

class VecEncoder:
    def __init__(self, table):
        self.table = table

    def encode(self, item):
        v = np.asarray(self.table[item], float)
        return v / np.linalg.norm(v)


def test_score_parallel_and_orthogonal():
    records = [rec("p", caption="cp"), rec("o", caption="co")]
    img = VecEncoder({b"p": [1, 0], b"o": [1, 0]})
    txt = VecEncoder({"cp": [2, 0], "co": [0, 3]})
    out = score_pairs(records, img, txt, loader=lambda ref: ref.encode())
    assert out[0].clip_score == pytest.approx(1.0, abs=1e-12)
    assert out[1].clip_score == pytest.approx(0.0, abs=1e-12)


def test_score_toy_encoder_oracle(tiny_corpus):
    root, manifest = tiny_corpus
    from coemogen.encoders import ImageEncoderClient, TextEncoderClient, build_toy_encoders
    from conftest import TINY

    ie, te = build_toy_encoders(TINY.encoder_profile)
    loader = FileImageLoader(root)
    for r in manifest.records[:5]:
        a = ImageEncoderClient(ie).encode(loader(r.image_ref))
        b = TextEncoderClient(te).encode(r.caption)
        assert r.clip_score == pytest.approx(float(np.dot(a, b)), abs=1e-6)


def test_score_encoder_failure_flagged():
    class Broken:
        def encode(self, item):
            raise ValueError("nope")

    out = score_pairs([rec("a", caption="c")], Broken(), Broken(), loader=lambda r: b"")
    assert out[0].status == "score_failed" and out[0].clip_score is None


# -- filtering -----------------------------------------------------------------------

def test_filter_two_lowest_of_ten():
    m = CorpusManifest([rec(f"i{k}", score=s) for k, s in enumerate([.5, .1, .9, .3, .2, .8, .7, .6, .4, .05])])
    kept, dropped = filter_bottom_fraction(m, 0.2)
    assert sorted(r.clip_score for r in dropped) == [.05, .1]
    assert len(kept) == 8


def test_filter_zero_fraction():
    m = CorpusManifest([rec(f"i{k}", score=k / 10) for k in range(5)])
    kept, dropped = filter_bottom_fraction(m, 0.0)
    assert kept.records == m.records and not dropped.records


def test_filter_tie_break():
    m = CorpusManifest([rec(r, score=0.5) for r in ["d", "b", "a", "c"]])
    _, dropped = filter_bottom_fraction(m, 0.25)
    assert [r.image_ref for r in dropped] == ["a"]


def test_filter_missing_scores_named():
    m = CorpusManifest([rec("has", score=0.1), rec("lacks", score=None)])
    with pytest.raises(CurationError, match="lacks"):
        filter_bottom_fraction(m, 0.2)


def test_filter_not_idempotent():
    m = CorpusManifest([rec(f"i{k}", score=k / 10) for k in range(10)])
    kept, _ = filter_bottom_fraction(m, 0.2)
    again, dropped = filter_bottom_fraction(kept, 0.2)
    assert len(dropped) == 1 and len(again) == 7


records_strategy = st.lists(
    st.tuples(st.sampled_from(EMOTIONS), st.floats(-1, 1, allow_nan=False), st.integers(0, 30)),
    min_size=1, max_size=50,
)


@given(records_strategy, st.floats(0, 0.95))
@settings(max_examples=60)
def test_filter_properties(rows, fraction):
    m = CorpusManifest([CorpusRecord(f"img{i:03d}_{k}", e, "c", s) for i, (e, s, k) in enumerate(rows)])
    kept, dropped = filter_bottom_fraction(m, fraction)
    counts = m.per_emotion_counts
    for e, n in counts.items():
        k = [r for r in kept.records if r.label == e]
        d = [r for r in dropped.records if r.label == e]
        assert len(k) + len(d) == n
        assert len(d) == int(np.floor(fraction * n))
        if k and d:
            assert max((r.clip_score, r.image_ref) for r in d) < min((r.clip_score, r.image_ref) for r in k)
    assert {r.image_ref for r in kept} | {r.image_ref for r in dropped} == {r.image_ref for r in m}


# -- confidence curation -------------------------------------------------------------

class ProbStub:
    def __init__(self, table):
        self.table = table

    def predict_proba(self, image_bytes):
        return np.asarray(self.table[image_bytes.decode()])


def peaked(emotion, p):
    v = np.full(8, (1 - p) / 7)
    v[int(emotion)] = p
    return v


def test_confidence_examples():
    table = {"f": peaked(Emotion.FEAR, 0.9), "x": peaked(Emotion.EXCITEMENT, 0.95), "a": peaked(Emotion.AWE, 0.6)}
    records = [rec("f", "awe"), rec("x"), rec("a")]
    out = curate_by_confidence(records, ProbStub(table), 0.75, {"excitement", "disgust"},
                               loader=lambda r: r.encode())
    assert [r.image_ref for r in out] == ["f"]
    assert out.records[0].label is Emotion.FEAR and out.records[0].emotion_confidence == pytest.approx(0.9)


def test_confidence_idempotent():
    table = {"f": peaked(Emotion.FEAR, 0.9), "s": peaked(Emotion.SADNESS, 0.8)}
    once = curate_by_confidence([rec("f"), rec("s")], ProbStub(table), 0.75, loader=lambda r: r.encode())
    twice = curate_by_confidence(once, ProbStub(table), 0.75, loader=lambda r: r.encode())
    assert once.records == twice.records


def test_confidence_classifier_failure_flagged():
    table = {"bad": np.ones(8)}
    out = curate_by_confidence([rec("bad")], ProbStub(table), 0.75, loader=lambda r: r.encode())
    assert out.records[0].status == "classify_failed"


def test_fixed_weight_classifier_distribution():
    p = FixedWeightClassifier(0).predict_proba(png(100))
    assert p.shape == (8,) and abs(p.sum() - 1) < 1e-6 and (p >= 0).all()


def test_pixel_classifier_separates_synthetic_classes():
    x, y = render_batch(20, 5)
    clf = PixelEmotionClassifier().fit(x, y)
    xt, yt = render_batch(10, 99)
    assert (clf.predict_proba_array(xt).argmax(1) == yt).mean() > 0.9


# -- oversampling --------------------------------------------------------------------

def test_oversample_two_class():
    m = CorpusManifest([rec(f"a{i}", "awe") for i in range(4)] + [rec(f"f{i}", "fear") for i in range(2)])
    epoch = oversample(m, 0)
    assert Counter(r.label for r in epoch) == {Emotion.AWE: 4, Emotion.FEAR: 4}


def test_oversample_balanced_is_permutation():
    m = CorpusManifest([rec(f"a{i}", "awe") for i in range(3)] + [rec(f"f{i}", "fear") for i in range(3)])
    epoch = oversample(m, 1)
    assert sorted(r.image_ref for r in epoch) == sorted(r.image_ref for r in m)


def test_oversample_empty_raises():
    with pytest.raises(CurationError):
        oversample(CorpusManifest([]), 0)


@given(st.dictionaries(st.sampled_from(EMOTIONS), st.integers(1, 7), min_size=1), st.integers(0, 2**31))
def test_oversample_properties(counts, seed):
    m = CorpusManifest([rec(f"{e.label}{i}", e) for e, n in counts.items() for i in range(n)])
    epoch = oversample(m, seed)
    c = Counter(r.label for r in epoch)
    assert set(c.values()) == {max(counts.values())}
    assert epoch == oversample(m, seed)


# -- tokens --------------------------------------------------------------------------

def test_token_report_examples():
    assert token_frequency_report(CorpusManifest([rec("a", "fear", caption="dark dark forest")])) == {
        Emotion.FEAR: {"dark": 2, "forest": 1}}
    assert token_frequency_report(CorpusManifest([])) == {}
    rep = token_frequency_report(CorpusManifest([rec("a", "fear", caption="night"), rec("b", "awe", caption="sky")]))
    assert rep == {Emotion.AWE: {"sky": 1}, Emotion.FEAR: {"night": 1}}


def test_token_report_stop_words_and_top():
    m = CorpusManifest([rec("a", "awe", caption="The sky and the sea sky")])
    rep = token_frequency_report(m, stop_words={"the", "and"})
    assert rep == {Emotion.AWE: {"sky": 2, "sea": 1}}
    assert top_tokens(rep, 1) == ["sky"]


# -- manifests -----------------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    m = CorpusManifest([rec("a", "awe", score=0.25, caption="a sky"), rec("b", "fear", caption="")])
    path = write_manifest(tmp_path / "m.jsonl", m)
    back = read_manifest(path)
    assert back.records == m.records
    line = json.loads(path.read_text().splitlines()[0])
    assert {"image_ref", "label", "caption", "clip_score", "emotion_confidence"} <= set(line)
    assert line["label"] == "awe"


def test_manifest_rejects_unknown_field(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"image_ref": "a", "label": "awe", "caption": "", "bogus": 1}) + "\n")
    with pytest.raises((DataError, CurationError, ValueError)):
        read_manifest(p)


def test_per_emotion_counts_match():
    m = CorpusManifest([rec("a", "awe"), rec("b", "awe"), rec("c", "fear")])
    assert m.per_emotion_counts == {Emotion.AWE: 2, Emotion.FEAR: 1}


def test_synthetic_corpus_deterministic(tmp_path):
    a = write_synthetic_corpus(tmp_path / "a", per_class=2, seed=4)
    b = write_synthetic_corpus(tmp_path / "b", per_class=2, seed=4)
    assert dumps_manifest(a) == dumps_manifest(b)
    assert len(a) == 16 and set(a.per_emotion_counts.values()) == {2}
    ref = a.records[0].image_ref
    assert (tmp_path / "a" / ref).read_bytes() == (tmp_path / "b" / ref).read_bytes()
