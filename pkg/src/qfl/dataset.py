"""Prepared dataset: split manifests (JSON lines), a tile-feature container, a vocabulary file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import container
from .corpus import (Case, CorpusConfig, Sentence, Tag, Variant, build_tokenizer, filter_report,
                     generate_corpus, split_patients)
from .tokenizer import Tokenizer

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    splits: dict[str, list[Case]]
    tokenizer: Tokenizer
    corpus_config: CorpusConfig

    def __getitem__(self, name: str) -> list[Case]:
        return self.splits[name]

    def case(self, case_id: str) -> Case:
        for cases in self.splits.values():
            for c in cases:
                if c.case_id == case_id:
                    return c
        raise KeyError(case_id)

    def max_text_len(self) -> int:
        """Longest CLS/BOS-prefixed sequence over every split and variant (+1 for EOS)."""
        return 1 + max(len(filter_report(c, Variant.FULL, self.tokenizer))
                       for cases in self.splits.values() for c in cases)


def prepare(config: CorpusConfig, split_ratios=(0.8, 0.1, 0.1), split_seed: int | None = None) -> Dataset:
    cases = generate_corpus(config=config)
    train, val, test = split_patients(cases, split_ratios, config.seed if split_seed is None else split_seed)
    return Dataset({"train": train, "val": val, "test": test}, build_tokenizer(train), config)


def _manifest_line(case: Case, tokenizer: Tokenizer, offset: int) -> str:
    rec = {
        "case_id": case.case_id,
        "patient_id": case.patient_id,
        "lesion_class": case.lesion_class,
        "visible": list(case.visible),
        "hidden": list(case.hidden),
        "sentences": [{"tag": s.tag.value, "text": s.text} for s in case.sentences],
        "tokens_full": filter_report(case, Variant.FULL, tokenizer),
        "tokens_he_only": filter_report(case, Variant.HE_ONLY, tokenizer),
        "n_slides": case.n_slides,
        "tile_count": int(len(case.tiles)),
        "feature_offset": int(offset),
    }
    return container.canonical_json(rec)


def save(dataset: Dataset, root, force: bool = False) -> None:
    root = Path(root)
    if (root / "dataset.json").exists() and not force:
        raise FileExistsError(f"{root} already holds a dataset (use force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)
    offset = 0
    blocks = []
    counts = {}
    for name in SPLITS:
        lines = []
        for c in dataset.splits[name]:
            lines.append(_manifest_line(c, dataset.tokenizer, offset))
            offset += len(c.tiles)
            blocks.append(c.tiles.astype(np.float32))
        (root / f"{name}.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        counts[name] = {"cases": len(dataset.splits[name]),
                        "patients": len({c.patient_id for c in dataset.splits[name]})}
    container.write(root / "features.bin", {"features": np.concatenate(blocks)},
                    {"feature_dim": dataset.corpus_config.feature_dim, "rows": offset})
    dataset.tokenizer.save(root / "vocab.json")
    meta = {"corpus": asdict(dataset.corpus_config), "counts": counts}
    (root / "dataset.json").write_text(container.canonical_json(meta) + "\n", encoding="utf-8")


def load(root) -> Dataset:
    root = Path(root)
    if not (root / "dataset.json").exists():
        raise FileNotFoundError(f"no prepared dataset at {root}")
    meta = json.loads((root / "dataset.json").read_text(encoding="utf-8"))
    tokenizer = Tokenizer.load(root / "vocab.json")
    _, arrays = container.read(root / "features.bin")
    features = arrays["features"]
    splits = {}
    for name in SPLITS:
        cases = []
        for line in (root / f"{name}.jsonl").read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            off, n = rec["feature_offset"], rec["tile_count"]
            cases.append(Case(
                patient_id=rec["patient_id"],
                case_id=rec["case_id"],
                lesion_class=rec["lesion_class"],
                visible=tuple(rec["visible"]),
                hidden=tuple(rec["hidden"]),
                sentences=[Sentence(Tag(s["tag"]), s["text"]) for s in rec["sentences"]],
                tiles=features[off:off + n],
                n_slides=rec["n_slides"],
            ))
        splits[name] = cases
    return Dataset(splits, tokenizer, CorpusConfig(**meta["corpus"]))
