"""Command line interface tying the pipeline together.

Five subcommands chain into the full experiment:

    neuroretrieve gen-data --preset table1-pair --out data/pair
    neuroretrieve train --corpus data/pair-visual-synth.nrt --out runs/vis.nrp
    neuroretrieve eval --checkpoint runs/vis.nrp --corpus data/pair-visual-synth.nrt \
        --baseline bm25 --noise --out reports/vis
    neuroretrieve compare reports/vis.json reports/comb.json --out reports/sig
    neuroretrieve reproduce-shape --out runs/shape

Each command reads one JSON config (``--config``) or a named preset
(``--preset``), applies the stable flag overrides, validates everything
before any work starts, and writes a manifest with SHA-256 digests of its
inputs next to its artifacts. Report-producing commands render PNG figures
alongside the delimited output.

Exit codes: 0 success, 2 configuration or shape error, 3 I/O or format
error, 4 numeric failure. NEURORETRIEVE_THREADS caps evaluation
parallelism.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import os
import sys
import time
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .errors import ConfigError, DimensionError, FormatError, NumericsError
from .corpus import (
    Corpus,
    GeneratorConfig,
    balance_corpora,
    generate_synthetic,
    lexical_jaccard,
    make_vocab_pair,
    merge_corpora,
    read_corpus,
    split_corpus,
    write_corpus,
)
from .encoders import (
    POOLING_STRATEGIES,
    EncoderConfig,
    EncoderParams,
    TextProvider,
    load_checkpoint,
    save_checkpoint,
)
from .ict import DEFAULT_P_MASK, IctPair, build_training_pairs
from .training import TrainConfig, fit, write_history_csv
from .retrieval import (
    DEFAULT_RATIOS,
    METRIC_NAMES,
    SweepReport,
    bm25_sweep,
    masking_sweep,
    noise_sweep,
    read_sweep_csv,
    significance_table,
    sweep_from_dict,
    sweep_to_dict,
    write_sweep_csv,
)
from .figures import render_history_figure, render_significance_figure, render_sweep_figure

COMPARE_HEADER = "metric,t,df,p,significant"

GRID_HEADER = (
    "training,pooling,eval_data,"
    "mrr_mean,mrr_std,hit1_mean,hit1_std,hit5_mean,hit5_std,hit10_mean,hit10_std,"
    "sig_mrr,sig_hit1,sig_hit5,sig_hit10"
)


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class EncoderSettings:
    """Encoder shape without T and C, which come from the corpus at use time."""

    hidden: int = 768
    layers: int = 1
    heads: int = 4
    pooling: str = "mean"

    def to_config(self, T: int, C: int, pooling: str | None = None) -> EncoderConfig:
        cfg = EncoderConfig(
            T=T,
            C=C,
            hidden=self.hidden,
            layers=self.layers,
            heads=self.heads,
            pooling=pooling if pooling is not None else self.pooling,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.to_config(1, 1)


_DEFAULT_GENERATOR = GeneratorConfig(
    n_records=120,
    passage_length_mean=18.0,
    query_count_target=120,
    T=8,
    C=4,
    latent_dim=32,
    noise_sigma=0.1,
    vocab_size=240,
    seed=0,
    name="synthetic",
    modality="visual",
    n_topics=8,
    off_topic_rate=0.2,
)


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs, loaded from one JSON file plus overrides.

    The run ``seed`` is the root: generator and training seeds default to it
    (generator_b to seed+1) unless their sections pin one explicitly.
    """

    seed: int = 0
    text_seed: int = 101
    pairs_per_record: int = 1
    p_mask: float = DEFAULT_P_MASK
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    threads: int | None = None
    generator: GeneratorConfig = _DEFAULT_GENERATOR
    generator_b: GeneratorConfig | None = None
    encoder: EncoderSettings = EncoderSettings()
    training: TrainConfig = TrainConfig()

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.text_seed < 0:
            raise ConfigError("text_seed must be non-negative")
        if self.pairs_per_record < 1:
            raise ConfigError("pairs_per_record must be positive")
        if not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError("p_mask must lie in [0, 1]")
        if not self.ratios:
            raise ConfigError("ratios must not be empty")
        if any(not 0.0 <= r <= 1.0 for r in self.ratios):
            raise ConfigError("every masking ratio must lie in [0, 1]")
        if list(self.ratios) != sorted(set(self.ratios)):
            raise ConfigError("ratios must be strictly increasing")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be a positive integer when given")
        self.generator.validate()
        if self.generator_b is not None:
            self.generator_b.validate()
            if self.generator_b.name == self.generator.name:
                raise ConfigError("generator and generator_b need distinct names")
        self.encoder.validate()
        self.training.validate()

    def to_dict(self) -> dict:
        def generator_dict(gen: GeneratorConfig | None):
            if gen is None:
                return None
            payload = dataclasses.asdict(gen)
            if payload["vocabulary"] is not None:
                payload["vocabulary"] = list(payload["vocabulary"])
            return payload

        return {
            "seed": self.seed,
            "text_seed": self.text_seed,
            "pairs_per_record": self.pairs_per_record,
            "p_mask": self.p_mask,
            "ratios": list(self.ratios),
            "threads": self.threads,
            "generator": generator_dict(self.generator),
            "generator_b": generator_dict(self.generator_b),
            "encoder": dataclasses.asdict(self.encoder),
            "training": dataclasses.asdict(self.training),
        }


_TOP_KEYS = (
    "seed",
    "text_seed",
    "pairs_per_record",
    "p_mask",
    "ratios",
    "threads",
    "generator",
    "generator_b",
    "encoder",
    "training",
)


def _require_mapping(value, where: str) -> Mapping:
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where} must be a JSON object")
    return value


def _reject_unknown(section: Mapping, allowed, where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


def _int_field(payload: Mapping, key: str, default: int) -> int:
    value = payload.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key} must be an integer")
    return value


def _generator_from(section: Mapping, default_seed: int, where: str) -> GeneratorConfig:
    field_names = [f.name for f in dataclasses.fields(GeneratorConfig)]
    _reject_unknown(section, field_names, where)
    base = {name: getattr(_DEFAULT_GENERATOR, name) for name in field_names}
    base["seed"] = default_seed
    base.update(section)
    if "query_count_target" not in section:
        base["query_count_target"] = base["n_records"]
    if base["vocabulary"] is not None:
        base["vocabulary"] = tuple(str(word) for word in base["vocabulary"])
    return GeneratorConfig(**base)


def _encoder_from(section: Mapping) -> EncoderSettings:
    field_names = [f.name for f in dataclasses.fields(EncoderSettings)]
    _reject_unknown(section, field_names, "encoder section")
    return EncoderSettings(**section)


def _training_from(section: Mapping, default_seed: int) -> TrainConfig:
    field_names = [f.name for f in dataclasses.fields(TrainConfig)]
    _reject_unknown(section, field_names, "training section")
    base = {"seed": default_seed}
    base.update(section)
    return TrainConfig(**base)


def run_config_from_dict(payload: Mapping) -> RunConfig:
    """Build and validate a RunConfig, rejecting unknown keys at every level."""
    payload = _require_mapping(payload, "run config")
    _reject_unknown(payload, _TOP_KEYS, "run config")
    seed = _int_field(payload, "seed", 0)

    generator = _generator_from(
        _require_mapping(payload.get("generator", {}), "generator section"),
        seed,
        "generator section",
    )
    generator_b = None
    if payload.get("generator_b") is not None:
        generator_b = _generator_from(
            _require_mapping(payload["generator_b"], "generator_b section"),
            seed + 1,
            "generator_b section",
        )

    ratios = payload.get("ratios", DEFAULT_RATIOS)
    if isinstance(ratios, (str, bytes)) or not isinstance(ratios, Sequence):
        raise ConfigError("ratios must be a list of numbers")
    try:
        ratio_grid = tuple(float(r) for r in ratios)
        p_mask = float(payload.get("p_mask", DEFAULT_P_MASK))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"non-numeric value in run config: {exc}") from exc

    threads = payload.get("threads")
    if threads is not None:
        threads = _int_field(payload, "threads", 1)

    cfg = RunConfig(
        seed=seed,
        text_seed=_int_field(payload, "text_seed", 101),
        pairs_per_record=_int_field(payload, "pairs_per_record", 1),
        p_mask=p_mask,
        ratios=ratio_grid,
        threads=threads,
        generator=generator,
        generator_b=generator_b,
        encoder=_encoder_from(_require_mapping(payload.get("encoder", {}), "encoder section")),
        training=_training_from(
            _require_mapping(payload.get("training", {}), "training section"), seed
        ),
    )
    try:
        cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"wrong value type in run config: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# Presets


PRESET_NAMES = (
    "learnability",
    "reproduce-shape",
    "robustness",
    "table1-audio",
    "table1-pair",
    "table1-visual",
)


def preset_payload(name: str) -> dict:
    """Named run configs, returned as plain payloads so they pass through the
    same validation as user-supplied JSON."""
    table1_visual = {
        "n_records": 1200,
        "passage_length_mean": 23.0,
        "T": 8,
        "C": 4,
        "latent_dim": 32,
        "noise_sigma": 0.1,
        "vocab_size": 674,
        "name": "visual-synth",
        "modality": "visual",
        "n_topics": 8,
        "off_topic_rate": 0.2,
    }
    table1_audio = dict(
        table1_visual,
        passage_length_mean=26.0,
        vocab_size=543,
        name="audio-synth",
        modality="auditory",
    )
    small_generator = {
        "n_records": 200,
        "passage_length_mean": 12.0,
        "T": 8,
        "C": 4,
        "latent_dim": 32,
        "noise_sigma": 0.0,
        "vocab_size": 100,
        "name": "learnable",
        "modality": "visual",
        "n_topics": 0,
        "off_topic_rate": 0.0,
    }
    small_training = {
        "learning_rate": 3e-3,
        "batch_size": 32,
        "warmup_epochs": 5,
        "max_epochs": 100,
        "patience": 100,
    }

    presets: dict[str, dict] = {}
    presets["table1-visual"] = {"generator": dict(table1_visual)}
    presets["table1-audio"] = {"generator": dict(table1_audio)}
    vocab_visual, vocab_audio = make_vocab_pair(674, 543, 181)
    presets["table1-pair"] = {
        "generator": dict(table1_visual, vocabulary=list(vocab_visual)),
        "generator_b": dict(table1_audio, vocabulary=list(vocab_audio)),
    }
    presets["learnability"] = {
        "pairs_per_record": 3,
        "p_mask": 0.0,
        "ratios": [0.0],
        "generator": dict(small_generator),
        "encoder": {"hidden": 32, "layers": 1, "heads": 4, "pooling": "multi"},
        "training": dict(small_training),
    }
    presets["robustness"] = {
        "pairs_per_record": 2,
        "p_mask": 0.9,
        "generator": dict(
            small_generator,
            vocab_size=240,
            name="overlap",
            n_topics=8,
            off_topic_rate=0.2,
        ),
        "encoder": {"hidden": 32, "layers": 1, "heads": 4, "pooling": "mean"},
        "training": dict(small_training, patience=15),
    }
    shape_visual, shape_audio = make_vocab_pair(200, 200, 60)
    shape_generator = {
        "n_records": 120,
        "passage_length_mean": 14.0,
        "T": 8,
        "C": 4,
        "latent_dim": 32,
        "noise_sigma": 0.1,
        "vocab_size": 200,
        "name": "visual-synth",
        "modality": "visual",
        "n_topics": 6,
        "off_topic_rate": 0.2,
        "vocabulary": list(shape_visual),
    }
    presets["reproduce-shape"] = {
        "pairs_per_record": 2,
        "p_mask": 0.9,
        "generator": dict(shape_generator),
        "generator_b": dict(
            shape_generator,
            name="audio-synth",
            modality="auditory",
            vocabulary=list(shape_audio),
        ),
        "encoder": {"hidden": 32, "layers": 1, "heads": 4, "pooling": "mean"},
        "training": dict(small_training, max_epochs=40, patience=10),
    }

    try:
        return presets[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}"
        ) from None


def parse_ratio_list(text: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--ratios expects comma-separated floats: {exc}") from exc
    if not values:
        raise ConfigError("--ratios expects at least one value")
    return values


def load_config_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return dict(_require_mapping(payload, "run config"))


def load_run_config(args) -> RunConfig:
    preset = getattr(args, "preset", None)
    config_path = getattr(args, "config", None)
    if preset is not None:
        payload = copy.deepcopy(preset_payload(preset))
    elif config_path is not None:
        payload = load_config_file(config_path)
    else:
        payload = {}

    if getattr(args, "seed", None) is not None:
        payload["seed"] = args.seed
    if getattr(args, "pooling", None) is not None:
        section = dict(_require_mapping(payload.get("encoder", {}), "encoder section"))
        section["pooling"] = args.pooling
        payload["encoder"] = section
    if getattr(args, "ratios", None) is not None:
        payload["ratios"] = parse_ratio_list(args.ratios)
    return run_config_from_dict(payload)


# ---------------------------------------------------------------------------
# Manifests


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def write_manifest(
    path,
    *,
    command: str,
    config: RunConfig,
    inputs: Mapping[str, Path],
    artifacts: Mapping[str, Path],
    started: float,
    extra: Mapping | None = None,
) -> Path:
    payload = {
        "tool": "neuroretrieve",
        "version": __version__,
        "command": command,
        "config": config.to_dict(),
        "inputs": {
            name: {"path": str(p), "sha256": sha256_file(p)} for name, p in inputs.items()
        },
        "artifacts": {name: str(p) for name, p in artifacts.items()},
        "wall_clock_seconds": time.time() - started,
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    _write_json_atomic(path, payload)
    return path


def verify_manifest(path) -> bool:
    """Re-hash the manifest's recorded inputs and compare digests."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = payload["inputs"].values()
        return all(sha256_file(e["path"]) == e["sha256"] for e in entries)
    except (KeyError, TypeError, AttributeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed manifest {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# gen-data


def corpus_stats_from_pairs(corpus: Corpus, pairs: Sequence[IctPair]) -> dict:
    query_lengths = [len(p.query_words) for p in pairs]
    passage_lengths = [len(p.positive_tokens) for p in pairs]
    return {
        "name": corpus.name,
        "modality": corpus.records[0].modality if corpus.records else "",
        "n_records": len(corpus.records),
        "n_queries": len(pairs),
        "total_words": int(sum(query_lengths) + sum(passage_lengths)),
        "unique_words": len(corpus.vocabulary),
        "avg_query_length": float(sum(query_lengths) / len(pairs)),
        "avg_passage_length": float(sum(passage_lengths) / len(pairs)),
    }


def _print_stats_block(stats: dict, path: Path) -> None:
    print(f"corpus {stats['name']} ({stats['modality']}): {stats['n_records']} records -> {path}")
    print(f"  queries             {stats['n_queries']}")
    print(f"  total words         {stats['total_words']}")
    print(f"  unique words        {stats['unique_words']}")
    print(f"  avg query length    {stats['avg_query_length']:.2f}")
    print(f"  avg passage length  {stats['avg_passage_length']:.2f}")


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = load_run_config(args)
    out = Path(args.out)

    generators = [cfg.generator]
    if cfg.generator_b is not None:
        generators.append(cfg.generator_b)
        base = out.with_suffix("") if out.suffix == ".nrt" else out
        paths = [base.with_name(f"{base.name}-{g.name}.nrt") for g in generators]
        manifest_path = base.with_name(f"{base.name}.manifest.json")
    else:
        paths = [out]
        manifest_path = out.with_name(out.name + ".manifest.json")

    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)

    corpora = []
    statistics = []
    artifacts = {}
    for gen_cfg, path in zip(generators, paths):
        provider = TextProvider(dimension=gen_cfg.latent_dim, seed=cfg.text_seed)
        corpus = generate_synthetic(gen_cfg, provider)
        write_corpus(corpus, path)
        pairs = build_training_pairs(corpus, cfg.pairs_per_record, cfg.p_mask, seed=cfg.seed)
        stats = corpus_stats_from_pairs(corpus, pairs)
        _print_stats_block(stats, path)
        corpora.append(corpus)
        statistics.append(stats)
        artifacts[f"corpus_{gen_cfg.name}"] = path

    extra: dict = {"statistics": statistics}
    if len(corpora) == 2:
        overlap = lexical_jaccard(corpora[0], corpora[1])
        print(f"lexical overlap (jaccard): {overlap:.4f}")
        extra["lexical_jaccard"] = overlap

    write_manifest(
        manifest_path,
        command="gen-data",
        config=cfg,
        inputs={},
        artifacts=artifacts,
        started=started,
        extra=extra,
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _split_and_merge(corpora: Sequence[Corpus], cfg: RunConfig) -> tuple[Corpus, Corpus, str]:
    """Train/dev corpora for one (individual) or two (combined) inputs.

    The combined path balances first, then splits each corpus with the same
    seed and merges only the train and dev halves, so each modality's test
    split stays untouched for later evaluation.
    """
    if len(corpora) == 1:
        train_c, dev_c, _ = split_corpus(corpora[0], seed=cfg.seed)
        return train_c, dev_c, "individual"
    balanced_a, balanced_b = balance_corpora(corpora[0], corpora[1], seed=cfg.seed)
    a_train, a_dev, _ = split_corpus(balanced_a, seed=cfg.seed)
    b_train, b_dev, _ = split_corpus(balanced_b, seed=cfg.seed)
    train_c = merge_corpora(a_train, b_train, name="combined-train")
    dev_c = merge_corpora(a_dev, b_dev, name="combined-dev")
    return train_c, dev_c, "combined"


def _fit_on_corpora(
    train_c: Corpus,
    dev_c: Corpus,
    cfg: RunConfig,
    pooling: str | None = None,
) -> tuple[EncoderParams, list, TextProvider]:
    enc_cfg = cfg.encoder.to_config(train_c.T, train_c.C, pooling=pooling)
    provider = TextProvider(dimension=enc_cfg.hidden, seed=cfg.text_seed)
    train_pairs = build_training_pairs(train_c, cfg.pairs_per_record, cfg.p_mask, seed=cfg.seed)
    dev_pairs = build_training_pairs(dev_c, cfg.pairs_per_record, cfg.p_mask, seed=cfg.seed + 1)
    params = EncoderParams.initialize(enc_cfg, seed=cfg.seed)
    best, history = fit(train_pairs, dev_pairs, params, provider, cfg.training)
    return best, history, provider


def cmd_train(args) -> int:
    started = time.time()
    cfg = load_run_config(args)
    corpus_paths = [Path(p) for p in args.corpus]
    if not 1 <= len(corpus_paths) <= 2:
        raise ConfigError("train takes one corpus (individual) or two (combined)")
    corpora = [read_corpus(p) for p in corpus_paths]

    train_c, dev_c, mode = _split_and_merge(corpora, cfg)
    best, history, _ = _fit_on_corpora(train_c, dev_c, cfg)

    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, out)
    history_csv = out.with_name(out.name + ".history.csv")
    history_png = out.with_name(out.name + ".history.png")
    write_history_csv(history, history_csv)
    render_history_figure(history, history_png)

    best_val = min(row.val_loss for row in history)
    modality_counts = Counter(r.modality for r in train_c.records)
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        command="train",
        config=cfg,
        inputs={f"corpus_{p.name}": p for p in corpus_paths},
        artifacts={"checkpoint": out, "history_csv": history_csv, "history_png": history_png},
        started=started,
        extra={
            "mode": mode,
            "modality_counts": dict(sorted(modality_counts.items())),
            "epochs_run": len(history),
            "best_val_loss": best_val,
            "stopped_early": any(row.stopped for row in history),
        },
    )
    print(
        f"trained {mode} model ({best.cfg.pooling} pooling): {len(history)} epochs, "
        f"best val loss {best_val:.4f} -> {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def _report_base(out) -> Path:
    out = Path(out)
    if out.suffix in (".json", ".csv"):
        out = out.with_suffix("")
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _test_pairs_for(corpus: Corpus, cfg: RunConfig) -> list[IctPair]:
    """One query per held-out record, seeded apart from the train/dev pairs."""
    _, _, test_c = split_corpus(corpus, seed=cfg.seed)
    return build_training_pairs(test_c, pairs_per_record=1, p_mask=cfg.p_mask, seed=cfg.seed + 2)


def _print_sweep_lines(sweeps: Sequence[SweepReport]) -> None:
    for sweep in sweeps:
        first, last = sweep.reports[0], sweep.reports[-1]
        print(
            f"sweep {sweep.system}: mean mrr {sweep.mean('mrr'):.4f}"
            f" (ratio {first.mask_ratio:g}: {first.mrr:.4f},"
            f" ratio {last.mask_ratio:g}: {last.mrr:.4f})"
        )


def _csv_suffix(system: str) -> str:
    return "" if system == "dense" else "_" + system.replace("-", "_")


def cmd_eval(args) -> int:
    started = time.time()
    cfg = load_run_config(args)
    checkpoint_path = Path(args.checkpoint)
    corpus_path = Path(args.corpus)
    params = load_checkpoint(checkpoint_path)
    corpus = read_corpus(corpus_path)
    if (corpus.T, corpus.C) != (params.cfg.T, params.cfg.C):
        raise DimensionError(
            f"checkpoint expects segments of shape {params.cfg.T}x{params.cfg.C}, "
            f"corpus provides {corpus.T}x{corpus.C}"
        )

    test_pairs = _test_pairs_for(corpus, cfg)
    provider = TextProvider(dimension=params.cfg.hidden, seed=cfg.text_seed)
    sweeps = [
        masking_sweep(
            test_pairs, params, provider, cfg.ratios, cfg.seed, cfg.threads, system="dense"
        )
    ]
    if args.baseline == "bm25":
        sweeps.append(bm25_sweep(test_pairs, cfg.ratios, seed=cfg.seed))
    if args.noise:
        sweeps.append(
            noise_sweep(
                test_pairs, params, provider, cfg.ratios, cfg.seed, cfg.threads, system="noise"
            )
        )
        untrained = EncoderParams.initialize(params.cfg, seed=cfg.seed + 9)
        sweeps.append(
            noise_sweep(
                test_pairs,
                untrained,
                provider,
                cfg.ratios,
                cfg.seed,
                cfg.threads,
                system="noise-untrained",
            )
        )

    base = _report_base(args.out)
    json_path = base.with_name(base.name + ".json")
    _write_json_atomic(
        json_path,
        {
            "checkpoint": str(checkpoint_path),
            "corpus": str(corpus_path),
            "pooling": params.cfg.pooling,
            "n_queries": len(test_pairs),
            "sweeps": [sweep_to_dict(s) for s in sweeps],
        },
    )
    artifacts = {"report_json": json_path}
    for sweep in sweeps:
        csv_path = base.with_name(base.name + _csv_suffix(sweep.system) + ".csv")
        write_sweep_csv(sweep, csv_path)
        artifacts[f"csv_{sweep.system}"] = csv_path
    figure_path = base.with_name(base.name + "_sweep.png")
    render_sweep_figure(sweeps, figure_path)
    artifacts["figure"] = figure_path

    write_manifest(
        base.with_name(base.name + ".manifest.json"),
        command="eval",
        config=cfg,
        inputs={"checkpoint": checkpoint_path, "corpus": corpus_path},
        artifacts=artifacts,
        started=started,
    )
    _print_sweep_lines(sweeps)
    return 0


# ---------------------------------------------------------------------------
# compare


def load_report(path) -> SweepReport:
    """A sweep from an eval report JSON, a bare sweep JSON, or a sweep CSV."""
    path = Path(path)
    if path.suffix == ".csv":
        return read_sweep_csv(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"report {path} is not valid JSON: {exc}") from exc
    if isinstance(payload, Mapping) and "sweeps" in payload:
        for entry in payload["sweeps"]:
            if isinstance(entry, Mapping) and entry.get("system") == "dense":
                return sweep_from_dict(entry, where=str(path))
        raise FormatError(f"report {path} contains no dense sweep")
    if isinstance(payload, Mapping) and "system" in payload:
        return sweep_from_dict(payload, where=str(path))
    raise FormatError(f"report {path} is neither an eval report nor a sweep")


def write_significance_csv(rows: Sequence[Mapping], path) -> None:
    lines = [COMPARE_HEADER]
    for row in rows:
        lines.append(
            f"{row['metric']},{row['t']!r},{row['df']},{row['p']!r},{int(row['significant'])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def cmd_compare(args) -> int:
    started = time.time()
    cfg = load_run_config(args)
    report_a = Path(args.report_a)
    report_b = Path(args.report_b)
    sweep_a = load_report(report_a)
    sweep_b = load_report(report_b)
    rows = significance_table(sweep_a, sweep_b)

    base = _report_base(args.out)
    csv_path = base.with_name(base.name + ".csv")
    write_significance_csv(rows, csv_path)
    figure_path = base.with_name(base.name + ".png")
    render_significance_figure(rows, figure_path)

    write_manifest(
        base.with_name(base.name + ".manifest.json"),
        command="compare",
        config=cfg,
        inputs={"report_a": report_a, "report_b": report_b},
        artifacts={"csv": csv_path, "figure": figure_path},
        started=started,
        extra={"significance": list(rows)},
    )
    for row in rows:
        flag = " *" if row["significant"] else ""
        print(f"{row['metric']:>5}: t={row['t']:.4f} df={row['df']} p={row['p']:.6g}{flag}")
    return 0


# ---------------------------------------------------------------------------
# reproduce-shape


def _grid_row(
    training: str,
    pooling: str,
    eval_data: str,
    sweep: SweepReport,
    significance: Sequence[Mapping] | None = None,
) -> dict:
    row = {
        "training": training,
        "pooling": pooling,
        "eval_data": eval_data,
        "metrics": sweep.summary(),
        "significance": None,
    }
    if significance is not None:
        row["significance"] = {
            entry["metric"]: {
                "t": entry["t"],
                "df": entry["df"],
                "p": entry["p"],
                "significant": entry["significant"],
            }
            for entry in significance
        }
    return row


def _grid_csv_line(row: Mapping) -> str:
    fields = [row["training"], row["pooling"], row["eval_data"]]
    for name in METRIC_NAMES:
        cell = row["metrics"][name]
        fields.append(repr(cell["mean"]))
        fields.append(repr(cell["std"]))
    for name in METRIC_NAMES:
        significance = row["significance"]
        if significance is None:
            fields.append("")
        else:
            fields.append(str(int(significance[name]["significant"])))
    return ",".join(fields)


def write_grid_csv(rows: Sequence[Mapping], path) -> None:
    lines = [GRID_HEADER] + [_grid_csv_line(row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def cmd_reproduce_shape(args) -> int:
    started = time.time()
    if getattr(args, "preset", None) is None and getattr(args, "config", None) is None:
        args.preset = "reproduce-shape"
    cfg = load_run_config(args)
    if cfg.generator_b is None:
        raise ConfigError("reproduce-shape needs both generator and generator_b")

    out_dir = Path(args.out)
    for sub in ("data", "checkpoints", "reports", "figures"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    generators = (cfg.generator, cfg.generator_b)
    corpora: dict[str, Corpus] = {}
    corpus_paths: dict[str, Path] = {}
    for gen_cfg in generators:
        provider = TextProvider(dimension=gen_cfg.latent_dim, seed=cfg.text_seed)
        corpus = generate_synthetic(gen_cfg, provider)
        path = out_dir / "data" / f"{gen_cfg.name}.nrt"
        write_corpus(corpus, path)
        corpora[gen_cfg.name] = corpus
        corpus_paths[gen_cfg.name] = path
    names = [g.name for g in generators]
    modality_of = {g.name: g.modality for g in generators}
    overlap = lexical_jaccard(corpora[names[0]], corpora[names[1]])
    print(f"corpora: {names[0]} and {names[1]}, lexical jaccard {overlap:.4f}")

    balanced = dict(zip(names, balance_corpora(corpora[names[0]], corpora[names[1]], cfg.seed)))
    splits = {name: split_corpus(balanced[name], seed=cfg.seed) for name in names}
    combined_train = merge_corpora(splits[names[0]][0], splits[names[1]][0], name="combined-train")
    combined_dev = merge_corpora(splits[names[0]][1], splits[names[1]][1], name="combined-dev")

    provider = TextProvider(dimension=cfg.encoder.hidden, seed=cfg.text_seed)
    test_pairs = {
        name: build_training_pairs(
            splits[name][2], pairs_per_record=1, p_mask=cfg.p_mask, seed=cfg.seed + 2
        )
        for name in names
    }

    bm25 = {name: bm25_sweep(test_pairs[name], cfg.ratios, seed=cfg.seed) for name in names}

    rows: list[dict] = []
    artifacts: dict[str, Path] = {
        f"corpus_{name}": corpus_paths[name] for name in names
    }
    combined_models: dict[str, EncoderParams] = {}
    n_fits = 3 * len(POOLING_STRATEGIES)
    fit_index = 0
    for pooling in POOLING_STRATEGIES:
        trained: dict[str, EncoderParams] = {}
        for name in names:
            fit_index += 1
            tick = time.time()
            best, history, _ = _fit_on_corpora(
                splits[name][0], splits[name][1], cfg, pooling=pooling
            )
            trained[name] = best
            print(
                f"[{fit_index}/{n_fits}] {pooling} individual-{name}: "
                f"{len(history)} epochs, {time.time() - tick:.1f}s"
            )
        fit_index += 1
        tick = time.time()
        combined_best, history, _ = _fit_on_corpora(
            combined_train, combined_dev, cfg, pooling=pooling
        )
        combined_models[pooling] = combined_best
        print(
            f"[{fit_index}/{n_fits}] {pooling} combined: "
            f"{len(history)} epochs, {time.time() - tick:.1f}s"
        )

        for name in names:
            checkpoint = out_dir / "checkpoints" / f"{pooling}-individual-{name}.nrp"
            save_checkpoint(trained[name], checkpoint)
            artifacts[f"checkpoint_{pooling}_individual_{name}"] = checkpoint
        checkpoint = out_dir / "checkpoints" / f"{pooling}-combined.nrp"
        save_checkpoint(combined_best, checkpoint)
        artifacts[f"checkpoint_{pooling}_combined"] = checkpoint

        for name in names:
            individual = masking_sweep(
                test_pairs[name],
                trained[name],
                provider,
                cfg.ratios,
                cfg.seed,
                cfg.threads,
                system=f"individual-{pooling}-{name}",
            )
            combined = masking_sweep(
                test_pairs[name],
                combined_models[pooling],
                provider,
                cfg.ratios,
                cfg.seed,
                cfg.threads,
                system=f"combined-{pooling}-{name}",
            )
            significance = significance_table(combined, individual)
            rows.append(_grid_row("individual", pooling, modality_of[name], individual))
            rows.append(
                _grid_row("combined", pooling, modality_of[name], combined, significance)
            )
            for sweep in (individual, combined):
                report_path = out_dir / "reports" / f"{sweep.system}.csv"
                write_sweep_csv(sweep, report_path)
                artifacts[f"report_{sweep.system}"] = report_path
            figure_path = out_dir / "figures" / f"{pooling}-{name}.png"
            render_sweep_figure([individual, combined, bm25[name]], figure_path)
            artifacts[f"figure_{pooling}_{name}"] = figure_path

    for name in names:
        noise = noise_sweep(
            test_pairs[name],
            combined_models["cls"],
            provider,
            cfg.ratios,
            cfg.seed,
            cfg.threads,
            system=f"noise-{name}",
        )
        rows.append(_grid_row("noise", "-", modality_of[name], noise))
        rows.append(_grid_row("bm25", "-", modality_of[name], bm25[name]))

    results_json = out_dir / "results.json"
    _write_json_atomic(
        results_json,
        {
            "ratios": list(cfg.ratios),
            "lexical_jaccard": overlap,
            "eval_sets": {name: modality_of[name] for name in names},
            "rows": rows,
        },
    )
    results_csv = out_dir / "results.csv"
    write_grid_csv(rows, results_csv)
    artifacts["results_json"] = results_json
    artifacts["results_csv"] = results_csv

    write_manifest(
        out_dir / "manifest.json",
        command="reproduce-shape",
        config=cfg,
        inputs={},
        artifacts=artifacts,
        started=started,
        extra={"lexical_jaccard": overlap, "n_rows": len(rows)},
    )
    print(f"grid report: {len(rows)} rows -> {results_csv}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuroretrieve",
        description="Signal-to-passage retrieval pipeline: generate, train, evaluate, compare.",
    )
    parser.add_argument(
        "--version", action="version", version=f"neuroretrieve {__version__}"
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add_config_flags(p: argparse.ArgumentParser) -> None:
        group = p.add_mutually_exclusive_group()
        group.add_argument("--config", metavar="PATH", help="JSON run config")
        group.add_argument("--preset", choices=PRESET_NAMES, help="named built-in config")
        p.add_argument("--seed", type=int, metavar="U64", help="override the run seed")

    p = subparsers.add_parser("gen-data", help="generate synthetic paired corpora")
    add_config_flags(p)
    p.add_argument("--out", required=True, metavar="PATH", help="corpus output path")
    p.set_defaults(func=cmd_gen_data)

    p = subparsers.add_parser("train", help="train a signal encoder")
    add_config_flags(p)
    p.add_argument(
        "--corpus",
        action="append",
        required=True,
        metavar="PATH",
        help="corpus file; repeat for combined training on two corpora",
    )
    p.add_argument("--pooling", choices=POOLING_STRATEGIES, help="override pooling strategy")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser("eval", help="masking sweep on the held-out test split")
    add_config_flags(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--corpus", required=True, metavar="PATH")
    p.add_argument("--ratios", metavar="CSV", help="comma-separated masking ratios")
    p.add_argument("--baseline", choices=("bm25",), help="add a lexical baseline sweep")
    p.add_argument(
        "--noise",
        action="store_true",
        help="add Gaussian-noise query controls (trained and untrained)",
    )
    p.add_argument("--out", required=True, metavar="PATH", help="report base path")
    p.set_defaults(func=cmd_eval)

    p = subparsers.add_parser("compare", help="paired t-tests between two sweep reports")
    add_config_flags(p)
    p.add_argument("report_a", metavar="REPORT_A", help="sweep report (JSON or CSV)")
    p.add_argument("report_b", metavar="REPORT_B", help="sweep report (JSON or CSV)")
    p.add_argument("--out", required=True, metavar="PATH", help="table base path")
    p.set_defaults(func=cmd_compare)

    p = subparsers.add_parser(
        "reproduce-shape",
        help="full grid: three trainings x four poolings, with baselines and significance",
    )
    add_config_flags(p)
    p.add_argument("--out", required=True, metavar="PATH", help="output directory")
    p.set_defaults(func=cmd_reproduce_shape)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
