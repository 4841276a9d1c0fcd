"""Synthetic melanocytic-lesion corpus.

Each case has *visible* attributes, which drive its tile features and are
described by H&E sentences in plain vocabulary, and *hidden* attributes,
which never reach the tile features and are described by non-H&E sentences
drawn from a reserved marker vocabulary (clinical history, stains, molecular
results). A model that writes marker words is therefore stating something it
cannot have seen.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng
from .tessellation import TessellationSpec, synthetic_slide, tessellate
from .tokenizer import Tokenizer


class Tag(str, enum.Enum):
    HE = "HE"
    NON_HE = "NON_HE"


class Variant(str, enum.Enum):
    FULL = "full"
    HE_ONLY = "he_only"


# (attribute, sentence template, values)
VISIBLE_ATTRIBUTES = (
    ("architecture", "the lesion shows a {} growth pattern .", ("junctional", "compound", "intradermal", "lentiginous")),
    ("nests", "melanocytic nests are {} .", ("regular", "irregular", "confluent", "sparse")),
    ("cytology", "the melanocytes are {} .", ("small", "epithelioid", "spindled", "enlarged")),
    ("pigment", "pigmentation is {} .", ("absent", "light", "moderate", "heavy")),
    ("maturation", "maturation with depth is {} .", ("present", "partial", "absent")),
    ("atypia", "there is {} cytonuclear atypia .", ("no", "mild", "moderate", "severe")),
)

HIDDEN_ATTRIBUTES = (
    ("clinical", ("dysplasia", "melanoma", "carcinoma", "irritation")),
    ("stain", ("sox10", "prame", "hmb45", "ki67")),
    ("stain_result", ("positive", "negative")),
    ("mutation", ("braf", "nras", "hras", "tert")),
    ("history", ("melanoma", "nevi", "dysplasia", "sunburn")),
)

# non-H&E sentence kinds; "clinical" is written first, the rest after the H&E part
NON_HE_TEMPLATES = {
    "clinical": lambda h: f"clinically suspected of {h['clinical']} .",
    "stain": lambda h: f"immunohistochemistry shows {h['stain_result']} {h['stain']} staining .",
    "mutation": lambda h: f"molecular analysis revealed a {h['mutation']} mutation .",
    "history": lambda h: f"the patient has a history of {h['history']} .",
    "excision": lambda h: "this is a re-excision of a previous biopsy .",
}

LESION_CLASSES = ("common_nevus", "other_1", "other_2", "other_3")
DEFAULT_CLASS_MIX = {"common_nevus": 0.819, "other_1": 0.1, "other_2": 0.05, "other_3": 0.031}

# class-dependent number of non-H&E sentences
_NON_HE_COUNT = {
    "common_nevus": ((0, 1, 2), (0.1, 0.6, 0.3)),
    "other": ((0, 1, 2, 3), (0.05, 0.2, 0.35, 0.4)),
}
# class-dependent priors for the two attributes that track malignancy
_SKEWED = {
    "common_nevus": {"maturation": (0.8, 0.15, 0.05), "atypia": (0.6, 0.35, 0.05, 0.0)},
    "other": {"maturation": (0.3, 0.35, 0.35), "atypia": (0.1, 0.3, 0.35, 0.25)},
}


def _he_words() -> set[str]:
    words = set()
    for _, template, values in VISIBLE_ATTRIBUTES:
        for v in values:
            words.update(template.format(v).split())
    return words


def _non_he_words() -> set[str]:
    words = set()
    for _, values in HIDDEN_ATTRIBUTES:
        words.update(values)
    dummy = {name: "" for name, _ in HIDDEN_ATTRIBUTES}
    for render in NON_HE_TEMPLATES.values():
        words.update(render(dummy).split())
    return words


MARKER_WORDS = frozenset(_non_he_words() - _he_words())


@dataclass(frozen=True)
class Sentence:
    tag: Tag
    text: str

    def ids(self, tokenizer: Tokenizer) -> list[int]:
        return tokenizer.tokenize(self.text)


@dataclass
class CorpusConfig:
    n_cases: int = 600
    seed: int = 0
    class_mix: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_MIX))
    feature_dim: int = 192
    slide_size: int = 64
    tile_size: int = 8
    coverage_threshold: float = 0.05
    he_sentence_probability: float = 0.85
    empty_he_probability: float = 0.02
    tile_noise_std: float = 0.1


@dataclass
class Case:
    patient_id: str
    case_id: str
    lesion_class: str
    visible: tuple[int, ...]
    hidden: tuple[int, ...]
    sentences: list[Sentence]
    tiles: np.ndarray
    n_slides: int = 1

    def report(self, variant: Variant | str) -> list[Sentence]:
        if Variant(variant) is Variant.FULL:
            return list(self.sentences)
        return [s for s in self.sentences if s.tag is Tag.HE]

    @property
    def report_full(self) -> list[Sentence]:
        return self.report(Variant.FULL)

    @property
    def report_he_only(self) -> list[Sentence]:
        return self.report(Variant.HE_ONLY)

    def text(self, variant: Variant | str) -> str:
        return " ".join(s.text for s in self.report(variant))

    def hidden_dict(self) -> dict[str, str]:
        return {name: values[i] for (name, values), i in zip(HIDDEN_ATTRIBUTES, self.hidden)}

    def visible_dict(self) -> dict[str, str]:
        return {name: values[i] for (name, _, values), i in zip(VISIBLE_ATTRIBUTES, self.visible)}


class StubTileEncoder:
    """Deterministic stand-in for a pretrained tile encoder.

    A tile feature is the sum of one fixed random basis vector per visible
    attribute value plus small noise keyed by the tile index.
    """

    def __init__(self, feature_dim: int = 192, seed: int = 0, noise_std: float = 0.1):
        if feature_dim < len(VISIBLE_ATTRIBUTES):
            raise ValueError("feature_dim must be at least the number of visible attributes")
        self.feature_dim = feature_dim
        self.seed = seed
        self.noise_std = noise_std
        self.basis = [
            derive_rng(seed, "basis", name).standard_normal((len(values), feature_dim))
            for name, _, values in VISIBLE_ATTRIBUTES
        ]

    def encode(self, visible, tile_index: int) -> np.ndarray:
        base = sum(b[v] for b, v in zip(self.basis, visible))
        noise = derive_rng(self.seed, "tile", tuple(int(v) for v in visible), int(tile_index)).standard_normal(self.feature_dim)
        return (base + self.noise_std * noise).astype(np.float32)

    def encode_bag(self, visible, n_tiles: int) -> np.ndarray:
        return np.stack([self.encode(visible, t) for t in range(n_tiles)])


def stub_encode(visible, tile_index: int, feature_dim: int = 192, seed: int = 0) -> np.ndarray:
    return StubTileEncoder(feature_dim, seed).encode(visible, tile_index)


def _check_mix(class_mix: dict) -> None:
    if set(class_mix) - set(LESION_CLASSES):
        raise ValueError(f"unknown lesion classes {set(class_mix) - set(LESION_CLASSES)}")
    p = np.array(list(class_mix.values()), dtype=np.float64)
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("class_mix must be non-negative and sum to 1")


def _render(rng: np.random.Generator, lesion_class: str, visible, hidden, cfg: CorpusConfig) -> list[Sentence]:
    group = "common_nevus" if lesion_class == "common_nevus" else "other"
    he = []
    if rng.random() >= cfg.empty_he_probability:
        for a, ((_, template, values), v) in enumerate(zip(VISIBLE_ATTRIBUTES, visible)):
            if a == 0 or rng.random() < cfg.he_sentence_probability:
                he.append(Sentence(Tag.HE, template.format(values[v])))
    counts, probs = _NON_HE_COUNT[group]
    k = int(rng.choice(counts, p=probs))
    kinds = list(NON_HE_TEMPLATES)
    chosen = set(rng.choice(len(kinds), size=k, replace=False).tolist()) if k else set()
    h = {name: values[i] for (name, values), i in zip(HIDDEN_ATTRIBUTES, hidden)}
    non_he = [Sentence(Tag.NON_HE, NON_HE_TEMPLATES[kinds[i]](h)) for i in sorted(chosen)]
    lead = [s for s in non_he if s.text.startswith("clinically")]
    tail = [s for s in non_he if not s.text.startswith("clinically")]
    return lead + he + tail


def _sample_case(index: int, patient_id: str, cfg: CorpusConfig, encoder: StubTileEncoder) -> Case | None:
    rng = derive_rng(cfg.seed, "case", index)
    classes = list(cfg.class_mix)
    lesion_class = classes[int(rng.choice(len(classes), p=list(cfg.class_mix.values())))]
    group = "common_nevus" if lesion_class == "common_nevus" else "other"
    visible = []
    for name, _, values in VISIBLE_ATTRIBUTES:
        p = _SKEWED[group].get(name)
        visible.append(int(rng.choice(len(values), p=p)))
    hidden = tuple(int(rng.integers(len(values))) for _, values in HIDDEN_ATTRIBUTES)
    sentences = _render(rng, lesion_class, visible, hidden, cfg)

    n_slides = 1 + int(rng.choice(3, p=(0.3, 0.4, 0.3)))
    n_tiles = 0
    for _ in range(n_slides):
        tissue, pen = synthetic_slide(rng, cfg.slide_size)
        n_tiles += len(tessellate(TessellationSpec(tissue, pen, cfg.tile_size, cfg.coverage_threshold)))

    case = Case(
        patient_id=patient_id,
        case_id=f"C{index:06d}",
        lesion_class=lesion_class,
        visible=tuple(visible),
        hidden=hidden,
        sentences=sentences,
        tiles=np.zeros((0, cfg.feature_dim), dtype=np.float32),
        n_slides=n_slides,
    )
    # exclusion rules: an empty report variant, or no usable tissue tile
    if not case.report_he_only or not case.report_full or n_tiles == 0:
        return None
    case.tiles = encoder.encode_bag(case.visible, n_tiles)
    return case


def generate_corpus(n_cases: int = 600, class_mix: dict | None = None, seed: int = 0,
                    config: CorpusConfig | None = None) -> list[Case]:
    """Generate exactly ``n_cases`` kept cases; a pure function of the config and seed.

    Candidates are drawn in index order; candidates that fail the exclusion
    rules are skipped. Patients own one to three consecutive candidates.
    """
    cfg = config or CorpusConfig(n_cases=n_cases, seed=seed)
    if config is None and class_mix is not None:
        cfg.class_mix = dict(class_mix)
    if cfg.n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    _check_mix(cfg.class_mix)
    encoder = StubTileEncoder(cfg.feature_dim, cfg.seed, cfg.tile_noise_std)
    patient_rng = derive_rng(cfg.seed, "patients")
    cases: list[Case] = []
    index, patient, remaining = 0, -1, 0
    while len(cases) < cfg.n_cases:
        if remaining == 0:
            patient += 1
            remaining = 1 + int(patient_rng.choice(3, p=(0.84, 0.12, 0.04)))
        remaining -= 1
        case = _sample_case(index, f"P{patient:06d}", cfg, encoder)
        index += 1
        if case is not None:
            cases.append(case)
    return cases


def filter_report(case: Case, variant: Variant | str, tokenizer: Tokenizer) -> list[int]:
    """CLS followed by the variant's sentences joined by SEP."""
    ids = [tokenizer.cls_id]
    for k, s in enumerate(case.report(variant)):
        if k:
            ids.append(tokenizer.sep_id)
        ids.extend(s.ids(tokenizer))
    return ids


def report_body(case: Case, variant: Variant | str, tokenizer: Tokenizer) -> list[int]:
    """The variant's tokens without the CLS prefix (the generation target)."""
    return filter_report(case, variant, tokenizer)[1:]


def split_patients(cases: list[Case], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition cases by patient; cut points at cumulative ratios of the patient count."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    patients = sorted({c.patient_id for c in cases})
    if len(patients) < 3:
        raise ValueError("need at least 3 patients to split")
    order = derive_rng(seed, "split").permutation(len(patients))
    shuffled = [patients[i] for i in order]
    n = len(shuffled)
    cut1 = int(round(ratios[0] * n))
    cut2 = int(round((ratios[0] + ratios[1]) * n))
    assign = {}
    for k, p in enumerate(shuffled):
        assign[p] = 0 if k < cut1 else (1 if k < cut2 else 2)
    parts: tuple[list, list, list] = ([], [], [])
    for c in cases:
        parts[assign[c.patient_id]].append(c)
    return parts


def build_tokenizer(train_cases: list[Case]) -> Tokenizer:
    return Tokenizer.from_texts((c.text(Variant.FULL) for c in train_cases), MARKER_WORDS)


def count_marker_words(text: str) -> int:
    return sum(w in MARKER_WORDS for w in text.split())
