"""qfl: Q-Former report models on a synthetic pathology corpus.

Configuration is an INI file with one section per command plus ``[global]``
and ``[model]``; ``--set section.key=value`` overrides file values and the
``QFL_SEED`` environment variable overrides ``global.seed``. Every command
writes the resolved configuration next to its outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import dataset as D
from . import evaluation as E
from .checkpoint import Checkpoint
from .container import canonical_json
from .corpus import CorpusConfig, Variant, report_body
from .lm import LmConfig
from .trainer import (TrainConfig, generate_batch, generate_report, load_lm, lm_token_loss,
                      pretrain_stub_lm, save_lm, train_stage1, train_stage2)

log = logging.getLogger("qfl")

DEFAULTS: dict[str, dict[str, object]] = {
    "global": {"seed": 0, "dataset_dir": "data", "runs_dir": "runs"},
    "prepare": {"n_cases": 600, "feature_dim": 192, "slide_size": 64, "tile_size": 8,
                "coverage_threshold": 0.05, "split_ratios": (0.8, 0.1, 0.1)},
    "model": {"n_blocks": 4, "hidden_dim": 64, "n_heads": 4},
    "pretrain-lm": {"dim": 64, "n_layers": 2, "n_heads": 4, "epochs": 15, "batch_size": 32,
                    "peak_lr": 3e-3, "warmup_steps": 20},
    "train.stage1": {"epochs": 10, "batch_size": 20, "peak_lr": 5e-4, "warmup_steps": 50,
                     "weight_decay": 0.01, "smoothing": 0.9, "n_queries": 16, "max_tiles_per_case": 16,
                     "loss_weights": (1.0, 1.0, 1.0)},
    "train.stage2": {"epochs": 8, "batch_size": 36, "peak_lr": 1e-3, "warmup_steps": 20,
                     "weight_decay": 0.01, "n_queries": 64, "max_tiles_per_case": 16,
                     "stage1_checkpoint": "", "lm_checkpoint": ""},
    "evaluate": {"checkpoint_he_only": "", "checkpoint_full": "", "n_resamples": 1000, "split": "test"},
    "generate": {"checkpoint": "", "lm_checkpoint": "", "case_id": "", "max_len": 80,
                 "strategy": "greedy", "beam_width": 3},
    "hallucination": {"checkpoint_he_only": "", "checkpoint_full": "", "lm_checkpoint": "",
                      "max_len": 80, "split": "test"},
}


class ConfigError(Exception):
    """Bad configuration or missing prerequisite (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from exc
    return raw.strip()


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict[str, object]]:
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        if not parser.read(path):
            raise ConfigError(f"config file {path} not found")
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = _coerce(section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.rsplit(".", 1)
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {lhs}")
        cfg[section][key] = _coerce(section, key, raw)
    if os.environ.get("QFL_SEED"):
        try:
            cfg["global"]["seed"] = int(os.environ["QFL_SEED"])
        except ValueError as exc:
            raise ConfigError("QFL_SEED must be an integer") from exc
    return cfg


def render_config(cfg: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in cfg.items():
        parser[section] = {k: ",".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
                           for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _run_dir(cfg: dict, command: str, explicit: str | None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        digest = hashlib.sha256(render_config(cfg).encode()).hexdigest()[:8]
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = Path(cfg["global"]["runs_dir"]) / f"{command}-{stamp}-{digest}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need(path: str, what: str, hint: str) -> Path:
    if not path or not Path(path).exists():
        raise ConfigError(f"missing {what} ({path or 'not set'}); {hint}")
    return Path(path)


def _load_dataset(cfg) -> D.Dataset:
    root = Path(cfg["global"]["dataset_dir"])
    if not (root / "dataset.json").exists():
        raise ConfigError(f"no dataset at {root}; run `qfl prepare` first")
    return D.load(root)


def _model_overrides(cfg) -> dict:
    return {k: int(v) for k, v in cfg["model"].items()}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# -- commands ------------------------------------------------------------------------------

def cmd_prepare(cfg, args) -> Path:
    p = cfg["prepare"]
    corpus = CorpusConfig(n_cases=p["n_cases"], seed=cfg["global"]["seed"], feature_dim=p["feature_dim"],
                          slide_size=p["slide_size"], tile_size=p["tile_size"],
                          coverage_threshold=p["coverage_threshold"])
    root = Path(cfg["global"]["dataset_dir"])
    if (root / "dataset.json").exists() and not args.force:
        raise ConfigError(f"{root} already holds a dataset; pass --force to overwrite")
    ds = D.prepare(corpus, p["split_ratios"])
    D.save(ds, root, force=True)
    (root / "config.resolved.ini").write_text(render_config(cfg), encoding="utf-8")
    counts = {k: len(v) for k, v in ds.splits.items()}
    print(f"prepared {sum(counts.values())} cases at {root}: {counts}")
    return root


def cmd_pretrain_lm(cfg, args) -> Path:
    ds = _load_dataset(cfg)
    p = cfg["pretrain-lm"]
    run = _run_dir(cfg, "pretrain-lm", args.run_dir)
    (run / "config.resolved.ini").write_text(render_config(cfg), encoding="utf-8")
    lmcfg = LmConfig(vocab_size=ds.tokenizer.vocab_size, dim=p["dim"], n_layers=p["n_layers"],
                     n_heads=p["n_heads"], max_len=ds.max_text_len())
    seqs = [report_body(c, Variant.FULL, ds.tokenizer) for c in ds["train"]]
    lm = pretrain_stub_lm(seqs, lmcfg, cfg["global"]["seed"], p["epochs"], p["batch_size"],
                          p["peak_lr"], p["warmup_steps"])
    save_lm(lm, run / "lm.ckpt")
    held_out = [report_body(c, Variant.FULL, ds.tokenizer) for c in ds["val"]]
    _write_json(run / "lm_log.json", {"val_token_loss": lm_token_loss(lm, held_out),
                                      "vocab_size": lmcfg.vocab_size})
    print(run / "lm.ckpt")
    return run


def _train_config(cfg, stage: int) -> TrainConfig:
    section = cfg[f"train.stage{stage}"]
    fields = {k: v for k, v in section.items() if k not in ("stage1_checkpoint", "lm_checkpoint")}
    factory = TrainConfig.stage1 if stage == 1 else TrainConfig.stage2
    return factory(seed=cfg["global"]["seed"], **fields)


def cmd_train(cfg, args) -> Path:
    ds = _load_dataset(cfg)
    run = _run_dir(cfg, f"train-stage{args.stage}-{args.variant}", args.run_dir)
    (run / "config.resolved.ini").write_text(render_config(cfg), encoding="utf-8")
    tcfg = _train_config(cfg, args.stage)
    if args.stage == 1:
        ckpt = train_stage1(tcfg, ds, args.variant, **_model_overrides(cfg))
    else:
        s = cfg["train.stage2"]
        s1 = _need(s["stage1_checkpoint"], "stage-1 checkpoint", "train stage 1 first and set train.stage2.stage1_checkpoint")
        lm_path = _need(s["lm_checkpoint"], "stub LM checkpoint", "run `qfl pretrain-lm` and set train.stage2.lm_checkpoint")
        ckpt = train_stage2(tcfg, ds, args.variant, Checkpoint.load(s1), load_lm(lm_path))
    path = run / f"stage{args.stage}_{args.variant}.ckpt"
    ckpt.save(path)
    _write_json(run / "train_log.json", {
        "stage": args.stage, "variant": args.variant, "best_epoch": ckpt.epoch,
        "epochs": [{"epoch": i + 1, "train_loss": t, "val_loss": v}
                   for i, (t, v) in enumerate(zip(ckpt.train_history, ckpt.val_history))],
        "lr_trace": ckpt.config["lr_trace"],
    })
    print(path)
    return run


def cmd_evaluate(cfg, args) -> Path:
    ds = _load_dataset(cfg)
    e = cfg["evaluate"]
    he = _need(e["checkpoint_he_only"], "he_only stage-1 checkpoint", "set evaluate.checkpoint_he_only")
    full = _need(e["checkpoint_full"], "full stage-1 checkpoint", "set evaluate.checkpoint_full")
    run = _run_dir(cfg, "evaluate", args.run_dir)
    (run / "config.resolved.ini").write_text(render_config(cfg), encoding="utf-8")
    table = E.cross_eval(Checkpoint.load(he), Checkpoint.load(full), ds[e["split"]], ds.tokenizer,
                         e["n_resamples"], cfg["global"]["seed"])
    (run / "retrieval.csv").write_text(table.to_csv(), encoding="utf-8")
    (run / "retrieval.json").write_text(table.to_json(), encoding="utf-8")
    print(table.to_csv(), end="")
    return run


def cmd_generate(cfg, args) -> Path:
    ds = _load_dataset(cfg)
    g = cfg["generate"]
    case_id = args.case_id or g["case_id"]
    if not case_id:
        raise ConfigError("generate needs --case-id")
    ck = _need(g["checkpoint"], "stage-2 checkpoint", "set generate.checkpoint")
    lm = _need(g["lm_checkpoint"], "stub LM checkpoint", "set generate.lm_checkpoint")
    try:
        case = ds.case(case_id)
    except KeyError as exc:
        raise ConfigError(f"unknown case id {case_id}") from exc
    run = _run_dir(cfg, "generate", args.run_dir)
    (run / "config.resolved.ini").write_text(render_config(cfg), encoding="utf-8")
    ids = generate_report(Checkpoint.load(ck), load_lm(lm), case.tiles, g["max_len"], g["strategy"], g["beam_width"])
    text = ds.tokenizer.detokenize(ids)
    _write_json(run / "generated.json", {"case_id": case_id, "token_ids": ids, "text": text,
                                         "reference_full": case.text("full"),
                                         "reference_he_only": case.text("he_only")})
    print(text)
    return run


def cmd_hallucination(cfg, args) -> Path:
    ds = _load_dataset(cfg)
    h = cfg["hallucination"]
    lm = load_lm(_need(h["lm_checkpoint"], "stub LM checkpoint", "set hallucination.lm_checkpoint"))
    cases = ds[h["split"]]
    out = {}
    for model, key in (("he_only", "checkpoint_he_only"), ("full", "checkpoint_full")):
        ck = Checkpoint.load(_need(h[key], f"{model} stage-2 checkpoint", f"set hallucination.{key}"))
        generated = generate_batch(ck, lm, [c.tiles for c in cases], h["max_len"])
        rep = E.hallucination_report(model, [c.case_id for c in cases], generated, ds.tokenizer.marker_ids)
        out[model] = rep.to_dict()
    run = _run_dir(cfg, "hallucination", args.run_dir)
    (run / "config.resolved.ini").write_text(render_config(cfg), encoding="utf-8")
    (run / "hallucination.json").write_text(canonical_json(out) + "\n", encoding="utf-8")
    for model, rep in out.items():
        print(f"{model}: mean marker tokens {rep['mean']:.3f}, reports without markers {rep['fraction_zero']:.3f}")
    return run


COMMANDS = {
    "prepare": cmd_prepare,
    "pretrain-lm": cmd_pretrain_lm,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "generate": cmd_generate,
    "hallucination": cmd_hallucination,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qfl", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    parser.add_argument("--run-dir", help="write outputs here instead of a timestamped run directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("prepare", help="generate the synthetic corpus, splits and vocabulary")
    p.add_argument("--force", action="store_true")
    sub.add_parser("pretrain-lm", help="pretrain the stub decoder LM on training reports")
    p = sub.add_parser("train", help="train stage 1 or stage 2")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--variant", choices=[v.value for v in Variant], required=True)
    sub.add_parser("evaluate", help="2x2 cross-variant retrieval evaluation")
    p = sub.add_parser("generate", help="generate a report for one case")
    p.add_argument("--case-id")
    sub.add_parser("hallucination", help="count marker tokens in generated test reports")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, FileExistsError) as exc:
        print(f"qfl: error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, ValueError, RuntimeError, OSError) as exc:
        print(f"qfl: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
