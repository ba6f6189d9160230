from .clients import (
    CaptionerClient,
    ClassifierClient,
    EncoderClient,
    FixedWeightClassifier,
    PixelEmotionClassifier,
    TemplateCaptioner,
)
from .curation import (
    caption_corpus,
    curate_by_confidence,
    filter_bottom_fraction,
    oversample,
    score_pairs,
    token_frequency_report,
    top_tokens,
)
from .prompts import CaptionPrompt, render_prompt
from .records import CorpusManifest, CorpusRecord, FileImageLoader, read_manifest, write_manifest
