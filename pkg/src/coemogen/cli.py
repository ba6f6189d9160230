"""``coemogen`` command line: curate, train, generate, transfer, fuse, evaluate, report.

Configuration precedence (lowest to highest): built-in defaults, the JSON
file given with ``--config``, ``COEMOGEN_*`` path environment variables,
command-line flags. The resolved configuration is written as
``run_config.json`` into every output directory.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .errors import CoEmoGenError, ConfigurationError
from .taxonomy import EMOTIONS, EMOTION_NAMES, parse_emotion

logger = logging.getLogger("coemogen")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3

PATH_ENV = {"corpus_root": "COEMOGEN_CORPUS_ROOT", "base": "COEMOGEN_BASE", "checkpoint": "COEMOGEN_CHECKPOINT",
            "outputs": "COEMOGEN_OUTPUTS"}


def _section_defaults():
    from .inference import SamplerSettings
    from .model import ModelConfig
    from .training import PretrainConfig, TrainConfig

    return {
        "profile": "test",
        "jobs": 1,
        "paths": {"corpus_root": None, "base": None, "checkpoint": None, "outputs": None},
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "pretrain": dataclasses.asdict(PretrainConfig()),
        "sampler": dataclasses.asdict(SamplerSettings()),
        "curation": {"fraction": 0.2, "max_retries": 2, "emotional_prior": True, "confidence_threshold": None,
                     "excluded": [], "classifier_seed": 1},
        "eval": {"k": 5, "seed": 0, "vocab_top_n": 20, "classifier_per_class": 60, "classifier_seed": 12345},
    }


DEFAULTS = _section_defaults()


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key: {where + key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {where + key} must be an object")
            out[key] = merge_config(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(path: str | None, overrides: dict | None = None, env: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"--config file not found: {path}") from None
        cfg = merge_config(cfg, data)
    env = os.environ if env is None else env
    for key, var in PATH_ENV.items():
        if env.get(var):
            cfg["paths"][key] = env[var]
    if overrides:
        cfg = merge_config(cfg, overrides)
    if cfg["profile"] not in ("test", "production"):
        raise ConfigurationError(f"profile must be 'test' or 'production', got {cfg['profile']!r}")
    if cfg["profile"] == "production":
        raise ConfigurationError("the production profile needs external captioner/encoder/classifier bindings, "
                                 "which this build does not ship; use profile 'test'")
    return cfg


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need(value, flag: str):
    if value is None:
        raise ConfigurationError(f"{flag} is required")
    return value


def _model_config(cfg):
    from .model import ModelConfig

    return ModelConfig.from_dict(cfg["model"])


def _sampler(cfg):
    from .inference import SamplerSettings

    return SamplerSettings(**cfg["sampler"])


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from .corpus.synthetic import write_synthetic_corpus

    out = Path(args.out)
    manifest = write_synthetic_corpus(out, per_class=args.per_class, seed=args.seed)
    print(f"wrote {len(manifest)} images and {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_curate(args, cfg) -> int:
    from .corpus import (CaptionPrompt, CorpusManifest, FileImageLoader, FixedWeightClassifier, TemplateCaptioner,
                         caption_corpus, curate_by_confidence, filter_bottom_fraction, read_manifest, score_pairs,
                         token_frequency_report, top_tokens, write_manifest)
    from .encoders import ImageEncoderClient, TextEncoderClient, build_toy_encoders

    cur = cfg["curation"]
    manifest_path = Path(args.manifest)
    root = cfg["paths"]["corpus_root"] or manifest_path.parent
    out = Path(_need(args.out or cfg["paths"]["outputs"], "--out"))
    manifest = read_manifest(manifest_path)
    loader = FileImageLoader(root)
    image_enc, text_enc = build_toy_encoders(_model_config(cfg).encoder_profile)

    records = manifest.records
    if cur["confidence_threshold"] is not None:
        records = curate_by_confidence(records, FixedWeightClassifier(cur["classifier_seed"]),
                                       cur["confidence_threshold"], cur["excluded"], loader=loader, jobs=cfg["jobs"])
    records = caption_corpus(records, TemplateCaptioner(), CaptionPrompt(emotional_prior=cur["emotional_prior"]),
                             loader=loader, max_retries=cur["max_retries"], jobs=cfg["jobs"])
    records = score_pairs(records, ImageEncoderClient(image_enc), TextEncoderClient(text_enc), loader=loader,
                          jobs=cfg["jobs"])
    good, failed = CorpusManifest(records).split_failed()
    kept, dropped = filter_bottom_fraction(good, cur["fraction"])

    write_manifest(out / "kept.jsonl", kept)
    write_manifest(out / "dropped.jsonl", dropped)
    write_manifest(out / "failed.jsonl", failed)
    dist = {"input": {e.label: n for e, n in manifest.per_emotion_counts.items()},
            "kept": {e.label: n for e, n in kept.per_emotion_counts.items()},
            "dropped": {e.label: n for e, n in dropped.per_emotion_counts.items()},
            "failed": len(failed)}
    (out / "distribution.json").write_text(json.dumps(dist, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    report = token_frequency_report(kept)
    tokens = {"per_emotion": {e.label: counts for e, counts in report.items()},
              "vocabulary": top_tokens(report, cfg["eval"]["vocab_top_n"])}
    (out / "tokens.json").write_text(json.dumps(tokens, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    echo_config(cfg, out)
    print(f"kept {len(kept)} dropped {len(dropped)} failed {len(failed)} -> {out}")
    if len(failed):
        for r in failed:
            print(f"record {r.image_ref}: {r.status}: {r.error}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_pretrain_base(args, cfg) -> int:
    from .corpus import read_manifest
    from .training import PretrainConfig, pretrain_base_denoiser

    manifest_path = Path(args.manifest)
    root = cfg["paths"]["corpus_root"] or manifest_path.parent
    out = Path(_need(args.out or cfg["paths"]["base"], "--out"))
    pre = PretrainConfig(**cfg["pretrain"])
    state = pretrain_base_denoiser(read_manifest(manifest_path), _model_config(cfg), pre, root=root, progress=True)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, out)
    print(f"wrote base denoiser {out}")
    return EXIT_OK


def _load_base(path):
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"--base file not found: {p}")
    return torch.load(p)


def cmd_train(args, cfg) -> int:
    from .corpus import read_manifest
    from .inference import fit_clusters
    from .model import CoEmoGenModel
    from .training import TrainConfig, TrainingData, save_checkpoint, train

    manifest_path = Path(args.manifest)
    root = cfg["paths"]["corpus_root"] or manifest_path.parent
    out = Path(_need(args.out or cfg["paths"]["checkpoint"], "--out"))
    manifest = _usable(read_manifest(manifest_path))
    model = CoEmoGenModel(_model_config(cfg), _load_base(cfg["paths"]["base"]))
    config = TrainConfig.from_dict(cfg["train"])
    data = TrainingData(manifest, model, root)
    if args.resume is None and (out / "train_log.jsonl").exists():
        (out / "train_log.jsonl").unlink()
    trainer = train(manifest, model, config, out_dir=out, data=data, resume=args.resume,
                    log_path=out / "train_log.jsonl", stop_at=args.stop_at, progress=True)
    model.clusters = fit_clusters(manifest, model.image_encoder, root=root)
    save_checkpoint(out, model, trainer, config, manifest.digest())
    echo_config(cfg, out)
    print(f"trained {trainer.iteration} iterations -> {out}")
    return EXIT_OK


def _usable(manifest):
    from .corpus import CorpusManifest

    return CorpusManifest([r for r in manifest.records if r.ok])


def _load_model(cfg, checkpoint: str | None):
    from .model import CoEmoGenModel, ModelConfig
    from .training import load_checkpoint, read_checkpoint_meta

    ckpt = Path(_need(checkpoint or cfg["paths"]["checkpoint"], "--checkpoint"))
    meta = read_checkpoint_meta(ckpt)
    base = cfg["paths"]["base"]
    if base is None and (ckpt / "run_config.json").exists():
        base = json.loads((ckpt / "run_config.json").read_text(encoding="utf-8"))["paths"]["base"]
    model = CoEmoGenModel(ModelConfig.from_dict(meta["model"]), _load_base(base))
    load_checkpoint(ckpt, model)
    return model


def cmd_generate(args, cfg) -> int:
    from .inference import generate

    model = _load_model(cfg, args.checkpoint)
    out = Path(_need(args.out or cfg["paths"]["outputs"], "--out"))
    for name in args.emotion:
        label = parse_emotion(name)
        generate(label, args.n, args.seed, model, settings=_sampler(cfg), out_dir=out)
        print(f"wrote {args.n} images -> {out / label.label}")
    echo_config(cfg, out)
    return EXIT_OK


def cmd_transfer(args, cfg) -> int:
    from .inference import emotion_transfer, image_seed, write_images

    model = _load_model(cfg, args.checkpoint)
    out = Path(_need(args.out or cfg["paths"]["outputs"], "--out"))
    label = parse_emotion(args.emotion)
    settings = _sampler(cfg)
    images = torch.stack([emotion_transfer(label, args.concept, args.blend, model, seed=args.seed, settings=settings,
                                           index=i) for i in range(args.n)])
    name = f"transfer_{label.label}"
    meta = {"emotion": label.label, "emotions": [label.label], "weights": [args.blend], "concept": args.concept}
    write_images(out / name, name, images, [image_seed(args.seed, i) for i in range(args.n)], meta, settings, model)
    echo_config(cfg, out)
    print(f"wrote {args.n} images -> {out / name}")
    return EXIT_OK


def cmd_fuse(args, cfg) -> int:
    from .inference import emotion_fusion

    model = _load_model(cfg, args.checkpoint)
    out = Path(_need(args.out or cfg["paths"]["outputs"], "--out"))
    emotion_fusion(args.a, args.b, args.weight, model, seed=args.seed, n=args.n, settings=_sampler(cfg), out_dir=out)
    echo_config(cfg, out)
    print(f"wrote {args.n} images -> {out}")
    return EXIT_OK


def read_image_dir(folder: Path, size: int) -> dict:
    """``folder/<emotion>/*.png`` -> emotion -> ``(N, 3, H, W)`` tensors, files in sorted order."""
    from .encoders import load_image_tensor

    out = {}
    for e in EMOTIONS:
        files = sorted((folder / e.label).glob("*.png"))
        if files:
            out[e] = torch.stack([load_image_tensor(f.read_bytes(), size) for f in files])
    return out


def cmd_evaluate(args, cfg) -> int:
    from .corpus import PixelEmotionClassifier, read_manifest, token_frequency_report, top_tokens
    from .corpus.synthetic import render_batch
    from .encoders import build_toy_encoders
    from .evaluation import evaluate

    if args.reference is None or not Path(args.reference).is_dir():
        raise ConfigurationError(f"--reference directory not found: {args.reference}")
    if not Path(args.images).is_dir():
        raise ConfigurationError(f"--images directory not found: {args.images}")
    mcfg = _model_config(cfg)
    image_enc, text_enc = build_toy_encoders(mcfg.encoder_profile)
    generated = read_image_dir(Path(args.images), mcfg.image_size)
    reference = read_image_dir(Path(args.reference), mcfg.image_size)
    if not generated:
        raise ConfigurationError(f"--images has no <emotion>/*.png files: {args.images}")
    ev = cfg["eval"]
    if args.manifest:
        vocabulary = top_tokens(token_frequency_report(read_manifest(args.manifest)), ev["vocab_top_n"])
    else:
        vocabulary = list(EMOTION_NAMES)
    x, y = render_batch(ev["classifier_per_class"], ev["classifier_seed"])
    classifier = PixelEmotionClassifier().fit(x, y)
    meta = {"images": str(args.images), "reference": str(args.reference), "eval": ev}
    report = evaluate(generated, reference, classifier=classifier, image_encoder=image_enc, text_encoder=text_enc,
                      vocabulary=vocabulary, k=ev["k"], seed=ev["seed"], metadata=meta)
    out = Path(_need(args.out or cfg["paths"]["outputs"], "--out"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    echo_config(cfg, out)
    print(report.table_row(args.name))
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    from .evaluation import EvalReport

    rows = ["method | FID | LPIPS | Emo-A | Sem-C | Sem-D", "--- | --- | --- | --- | --- | ---"]
    for spec in args.reports:
        name, _, path = spec.rpartition("=")
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"report file not found: {p}")
        rep = EvalReport(**json.loads(p.read_text(encoding="utf-8")))
        name = name or p.parent.name
        rows.append(f"{name} | {rep.fidelity:.4f} | {rep.diversity:.4f} | {rep.emo_a * 100:.2f}% | "
                    f"{rep.sem_c:.4f} | {rep.sem_d:.4f}")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coemogen", description="Emotional image generation toolkit")
    parser.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    parser.add_argument("--jobs", type=int, help="max parallel workers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the bundled synthetic 8-class corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curate", help="caption, score and filter a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root", help="image root (default: the manifest's directory)")
    p.add_argument("--out")
    p.add_argument("--fraction", type=float)
    p.add_argument("--confidence-threshold", type=float)
    p.add_argument("--no-emotional-prior", action="store_true")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("pretrain-base", help="fit the test-profile base denoiser")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_pretrain_base)

    p = sub.add_parser("train", help="train mapper, VPE and HiLoRA adapters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--base")
    p.add_argument("--out")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--stop-at", type=int, help="stop after this iteration (for staged runs)")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--no-sem-loss", action="store_true", help="ablation: drop the semantic loss")
    p.set_defaults(func=cmd_train)

    def add_gen_common(p):
        p.add_argument("--checkpoint")
        p.add_argument("--base")
        p.add_argument("--out")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-n", type=int, default=1)
        p.add_argument("--steps", type=int)
        p.add_argument("--guidance", type=float)

    p = sub.add_parser("generate", help="generate images for one or more emotions")
    add_gen_common(p)
    p.add_argument("--emotion", action="append", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("transfer", help="apply an emotion to a neutral concept")
    add_gen_common(p)
    p.add_argument("--emotion", required=True)
    p.add_argument("--concept", required=True)
    p.add_argument("--blend", type=float, default=0.5)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("fuse", help="blend two emotions")
    add_gen_common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--weight", type=float, default=0.5)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="score generated images against references")
    p.add_argument("--images", required=True)
    p.add_argument("--reference")
    p.add_argument("--manifest", help="curated manifest used for the concept vocabulary")
    p.add_argument("--out")
    p.add_argument("--name", default="CoEmoGen")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="tabulate one or more report.json files ([name=]path)")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def flag_overrides(args) -> dict:
    o: dict = {"paths": {}}
    if args.jobs is not None:
        o["jobs"] = args.jobs
    for key in ("root", "base"):
        if getattr(args, key, None) is not None:
            o["paths"]["corpus_root" if key == "root" else key] = getattr(args, key)
    if args.command == "curate":
        c = {}
        if args.fraction is not None:
            c["fraction"] = args.fraction
        if args.confidence_threshold is not None:
            c["confidence_threshold"] = args.confidence_threshold
        if args.no_emotional_prior:
            c["emotional_prior"] = False
        o["curation"] = c
    if args.command == "pretrain-base" and args.steps is not None:
        o["pretrain"] = {"steps": args.steps}
    if args.command == "train":
        t = {}
        if args.iterations is not None:
            t["iterations"] = args.iterations
        if args.seed is not None:
            t["seed"] = args.seed
        if args.checkpoint_every is not None:
            t["checkpoint_every"] = args.checkpoint_every
        if args.no_sem_loss:
            t["sem_loss_weight"] = 0.0
        o["train"] = t
    if args.command in ("generate", "transfer", "fuse"):
        s = {}
        if args.steps is not None:
            s["steps"] = args.steps
        if args.guidance is not None:
            s["guidance"] = args.guidance
        o["sampler"] = s
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args.config, flag_overrides(args))
        return args.func(args, cfg)
    except CoEmoGenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
