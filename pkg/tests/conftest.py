import pytest
import torch

from coemogen.corpus import (CaptionPrompt, CorpusManifest, FileImageLoader, TemplateCaptioner, caption_corpus,
                             score_pairs)
from coemogen.corpus.synthetic import write_synthetic_corpus
from coemogen.encoders import ImageEncoderClient, TextEncoderClient, build_toy_encoders
from coemogen.model import CoEmoGenModel, ModelConfig

# small enough for sub-second steps, large enough to exercise every code path
TINY = ModelConfig(dim=32, channels=(8, 16, 16), mapper_hidden=64, text_layers=1, unet_heads=2, T=10)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return CoEmoGenModel(TINY)


def randomize_adapters(model, seed=0, scale=0.05):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.denoiser.adapter_parameters():
            p.copy_(torch.randn(p.shape, generator=g) * scale)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Synthetic corpus (4 images per emotion), captioned and scored under TINY encoders."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = write_synthetic_corpus(root, per_class=4, seed=3)
    image_enc, text_enc = build_toy_encoders(TINY.encoder_profile)
    loader = FileImageLoader(root)
    records = caption_corpus(manifest.records, TemplateCaptioner(), CaptionPrompt(), loader=loader)
    records = score_pairs(records, ImageEncoderClient(image_enc), TextEncoderClient(text_enc), loader=loader)
    return root, CorpusManifest(records)


# -- acceptance verdicts ---------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records and prints one pass/fail line, then asserts ``ok``."""

    def record(n: int, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
