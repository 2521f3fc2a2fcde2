#!/usr/bin/env python3
"""
Corpus Module

Unified visual-label-text triplets (x, y, t):
- Label data gets its text from prompt templates and shares one y per
  (modality, class), so every sample of a class carries the same description.
- Caption data keeps its free text and gets a fresh y per record unless
  identical captions are grouped.

Also handles manifest ingestion, payload files, the procedural corpus used
for desk-scale runs and batch assembly.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

from errors import ArgumentError, ConfigError, ManifestError, SchemaError
from settings import DEFAULT_IMAGE_TEMPLATES, DEFAULT_VIDEO_TEMPLATES
from text_encoder import TokenSequence, Vocabulary, tokenize_batch

logger = logging.getLogger(__name__)

MODALITIES = ("image", "video")
MANIFEST_FIELDS = {"source", "modality", "caption", "class", "split", "frames"}
HEADER_BYTES = 8

SYNTH_COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 80, 230),
    "yellow": (230, 220, 40),
    "purple": (150, 50, 200),
    "orange": (240, 140, 30),
    "white": (240, 240, 240),
    "cyan": (40, 210, 210),
}
SYNTH_SHAPES = ("circle", "square", "triangle", "cross")
SYNTH_DIRECTIONS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}
MAX_SYNTH_CLASSES = len(SYNTH_COLORS) * len(SYNTH_SHAPES)

QUESTION_SHAPE = "what shape is it"
QUESTION_COLOR = "what color is it"
QUESTION_MOTION = "which way does it move"


@dataclass
class PromptTemplate:
    """A text pattern with exactly one ``{class}`` slot."""
    pattern: str

    def __post_init__(self):
        if self.pattern.count("{class}") != 1:
            raise ConfigError(f"prompt template must contain exactly one {{class}} slot: '{self.pattern}'")

    def fill(self, class_name: str) -> str:
        return self.pattern.replace("{class}", class_name)


def label_to_text(class_name: str, templates: Sequence[str], index: int = 0) -> str:
    """Fill a class name into ``templates[index % len(templates)]``."""
    if not templates:
        raise ArgumentError("no prompt templates given")
    if not class_name or not class_name.strip():
        raise ArgumentError("class name is empty")
    return PromptTemplate(templates[index % len(templates)]).fill(class_name.strip())


@dataclass
class Triplet:
    """
    One corpus sample.

    ``x`` is either an inline array [T, H, W, C] or the path of a payload file.
    ``t`` is the default (first-template) text; see ``Corpus.text_of``.
    """
    x: Union[np.ndarray, str]
    y: int
    t: str
    modality: str
    class_name: Optional[str] = None
    caption: Optional[str] = None
    split: str = "train"
    frames: Optional[int] = None

    @property
    def is_label_data(self) -> bool:
        return self.class_name is not None

    def load(self) -> np.ndarray:
        array = read_payload(self.x) if isinstance(self.x, str) else self.x
        if self.frames is not None and array.shape[0] != self.frames:
            raise ArgumentError(f"{self.x}: expected {self.frames} frames, payload has {array.shape[0]}")
        if self.modality == "image" and array.shape[0] != 1:
            raise ArgumentError(f"image sample has {array.shape[0]} frames")
        return array


# ----------------------------------------------------------------------------
# Payload container
# ----------------------------------------------------------------------------

def write_payload(path: Union[str, Path], array: np.ndarray) -> Path:
    """8-byte header (T, H, W, C as little-endian uint16) then float32 LE data."""
    array = np.asarray(array)
    if array.ndim != 4:
        raise ArgumentError(f"payload must be [T, H, W, C], got shape {array.shape}")
    if max(array.shape) > np.iinfo(np.uint16).max:
        raise ArgumentError(f"payload dimension too large for the header: {array.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.asarray(array.shape, dtype="<u2").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return path


def read_payload(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"payload file not found: {path}")
    data = path.read_bytes()
    if len(data) < HEADER_BYTES:
        raise ArgumentError(f"payload {path} is shorter than its header")
    shape = tuple(int(d) for d in np.frombuffer(data[:HEADER_BYTES], dtype="<u2"))
    expected = int(np.prod(shape)) * 4
    if len(data) - HEADER_BYTES != expected:
        raise ArgumentError(f"payload {path}: header {shape} needs {expected} bytes, "
                            f"found {len(data) - HEADER_BYTES}")
    return np.frombuffer(data[HEADER_BYTES:], dtype="<f4").reshape(shape).astype(np.float32)


# ----------------------------------------------------------------------------
# Corpus
# ----------------------------------------------------------------------------

class LabelIndex:
    """Assigns y: shared per (modality, class), unique per caption unless grouped."""

    def __init__(self, group_identical_captions: bool = False):
        self.group_identical_captions = group_identical_captions
        self._ids: Dict[Tuple[str, str, str], int] = {}
        self._next = 0

    def _fresh(self) -> int:
        y = self._next
        self._next += 1
        return y

    def for_class(self, modality: str, class_name: str) -> int:
        key = ("class", modality, class_name)
        if key not in self._ids:
            self._ids[key] = self._fresh()
        return self._ids[key]

    def for_caption(self, caption: str) -> int:
        if not self.group_identical_captions:
            return self._fresh()
        key = ("caption", "", caption)
        if key not in self._ids:
            self._ids[key] = self._fresh()
        return self._ids[key]


class Corpus:
    """Immutable list of triplets with text templating per epoch."""

    def __init__(self, triplets: Sequence[Triplet],
                 image_templates: Sequence[str] = DEFAULT_IMAGE_TEMPLATES,
                 video_templates: Sequence[str] = DEFAULT_VIDEO_TEMPLATES,
                 template_cycling: bool = False):
        self.triplets: List[Triplet] = list(triplets)
        self.templates = {"image": list(image_templates), "video": list(video_templates)}
        self.template_cycling = template_cycling

    def __len__(self) -> int:
        return len(self.triplets)

    def __iter__(self) -> Iterator[Triplet]:
        return iter(self.triplets)

    def __getitem__(self, index: int) -> Triplet:
        return self.triplets[index]

    def text_of(self, index: int, epoch: int = 0) -> str:
        triplet = self.triplets[index]
        if triplet.is_label_data and self.template_cycling:
            return label_to_text(triplet.class_name, self.templates[triplet.modality], epoch)
        return triplet.t

    def indices(self, modality: Optional[str] = None, split: Optional[str] = None) -> List[int]:
        return [i for i, t in enumerate(self.triplets)
                if (modality is None or t.modality == modality) and (split is None or t.split == split)]

    def subset(self, indices: Iterable[int]) -> "Corpus":
        return Corpus([self.triplets[i] for i in indices], self.templates["image"],
                      self.templates["video"], self.template_cycling)

    def split(self, name: str) -> "Corpus":
        return self.subset(self.indices(split=name))

    def modalities(self) -> List[str]:
        present = {t.modality for t in self.triplets}
        return [m for m in MODALITIES if m in present]

    def all_texts(self) -> List[str]:
        """Every text the corpus can emit, all templates included."""
        texts = []
        for triplet in self.triplets:
            texts.append(triplet.t)
            if triplet.is_label_data:
                texts.extend(label_to_text(triplet.class_name, self.templates[triplet.modality], i)
                             for i in range(len(self.templates[triplet.modality])))
        return texts


def _record_error(line_number: int, message: str):
    raise SchemaError(line_number, message)


def _parse_record(line_number: int, line: str) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise ManifestError(line_number, f"malformed record: {e.msg}")
    if not isinstance(record, dict):
        raise ManifestError(line_number, "record must be a JSON object")

    unknown = set(record) - MANIFEST_FIELDS
    if unknown:
        _record_error(line_number, f"unknown field(s): {', '.join(sorted(unknown))}")
    if "source" not in record:
        _record_error(line_number, "missing field 'source'")
    if record.get("modality") not in MODALITIES:
        _record_error(line_number, f"modality must be one of {', '.join(MODALITIES)}, "
                                   f"got {record.get('modality')!r}")
    has_caption, has_class = "caption" in record, "class" in record
    if has_caption and has_class:
        _record_error(line_number, "record has both 'caption' and 'class'")
    if not has_caption and not has_class:
        _record_error(line_number, "record needs one of 'caption' or 'class'")
    return record


def load_manifest(path: Union[str, Path], corpus_cfg=None) -> Corpus:
    """
    Parse a line-delimited manifest into a Corpus.

    Payload sources are resolved relative to the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus manifest not found: {path}")

    image_templates = corpus_cfg.image_templates if corpus_cfg else DEFAULT_IMAGE_TEMPLATES
    video_templates = corpus_cfg.video_templates if corpus_cfg else DEFAULT_VIDEO_TEMPLATES
    templates = {"image": image_templates, "video": video_templates}
    labels = LabelIndex(corpus_cfg.group_identical_captions if corpus_cfg else False)
    exclude_label_data = corpus_cfg.exclude_label_data if corpus_cfg else False

    triplets = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            record = _parse_record(line_number, line)
            modality = record["modality"]
            source = str(path.parent / record["source"])

            if "class" in record:
                if exclude_label_data:
                    continue
                class_name = str(record["class"]).strip()
                if not class_name:
                    _record_error(line_number, "empty class name")
                text = label_to_text(class_name, templates[modality])
                triplet = Triplet(source, labels.for_class(modality, class_name), text, modality,
                                  class_name=class_name)
            else:
                caption = str(record["caption"]).strip()
                if not caption:
                    _record_error(line_number, "empty caption")
                triplet = Triplet(source, labels.for_caption(caption), caption, modality, caption=caption)

            triplet.split = record.get("split", "train")
            triplet.frames = record.get("frames")
            triplets.append(triplet)

    logger.info(f"Loaded {len(triplets)} triplets from {path}")
    template_cycling = corpus_cfg.template_cycling if corpus_cfg else False
    return Corpus(triplets, image_templates, video_templates, template_cycling)


def save_manifest(corpus: Corpus, directory: Union[str, Path]) -> Path:
    """Write ``manifest.jsonl`` and one payload file per triplet into ``directory``."""
    directory = Path(directory)
    try:
        (directory / "payloads").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot write corpus to {directory}: {e}")

    manifest_path = directory / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as f:
        for i, triplet in enumerate(corpus):
            array = triplet.load()
            source = f"payloads/{i:05d}.bin"
            write_payload(directory / source, array)
            record = {"source": source, "modality": triplet.modality, "split": triplet.split,
                      "frames": int(array.shape[0])}
            if triplet.is_label_data:
                record["class"] = triplet.class_name
            else:
                record["caption"] = triplet.caption if triplet.caption is not None else triplet.t
            f.write(json.dumps(record, sort_keys=True) + "\n")

    logger.info(f"Wrote {len(corpus)} records to {manifest_path}")
    return manifest_path


# ----------------------------------------------------------------------------
# Procedural corpus
# ----------------------------------------------------------------------------

def synth_class(index: int) -> Tuple[str, str, str]:
    """(color, shape, direction) of synthetic class ``index``."""
    colors = list(SYNTH_COLORS)
    directions = list(SYNTH_DIRECTIONS)
    color = colors[index % len(colors)]
    shape = SYNTH_SHAPES[(index + index // len(colors)) % len(SYNTH_SHAPES)]
    direction = directions[index % len(directions)]
    return color, shape, direction


def synth_class_name(index: int) -> str:
    color, shape, _ = synth_class(index)
    return f"{color} {shape}"


def class_attributes(class_name: str) -> Optional[Dict[str, str]]:
    """Attributes of a synthetic class name, or None for other names."""
    for index in range(MAX_SYNTH_CLASSES):
        if synth_class_name(index) == class_name:
            color, shape, direction = synth_class(index)
            return {"color": color, "shape": shape, "direction": direction}
    return None


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: float, cy: float, r: float, fill):
    box = [cx - r, cy - r, cx + r, cy + r]
    if shape == "circle":
        draw.ellipse(box, fill=fill)
    elif shape == "square":
        draw.rectangle(box, fill=fill)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)
    else:
        w = max(r / 3.0, 1.0)
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=fill)
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=fill)


def render_frames(class_index: int, size: int, T: int, rng: np.random.Generator) -> np.ndarray:
    """Frames [T, size, size, 3] in [0, 1] of one moving (or still, T=1) shape."""
    color, shape, direction = synth_class(class_index)
    dx, dy = SYNTH_DIRECTIONS[direction]
    radius = size * rng.uniform(0.18, 0.26)
    speed = size / 16.0
    travel = speed * (T - 1) / 2.0
    cx = size / 2.0 + rng.uniform(-size / 10.0, size / 10.0) - dx * travel
    cy = size / 2.0 + rng.uniform(-size / 10.0, size / 10.0) - dy * travel
    background = tuple(int(v) for v in rng.integers(20, 60, size=3))

    frames = []
    for step in range(T):
        image = Image.new("RGB", (size, size), background)
        _draw_shape(ImageDraw.Draw(image), shape, cx + dx * speed * step, cy + dy * speed * step,
                    radius, SYNTH_COLORS[color])
        frames.append(np.asarray(image, dtype=np.float32) / 255.0)
    stack = np.stack(frames)
    noise = rng.normal(0.0, 0.02, size=stack.shape).astype(np.float32)
    return np.clip(stack + noise, 0.0, 1.0).astype(np.float32)


def synth_corpus(seed: int = 0, n_classes: int = 8, n_per_class: int = 8, image_size: int = 32,
                 video_T: int = 4, video_fraction: float = 0.0, held_out_per_class: int = 0,
                 image_templates: Sequence[str] = DEFAULT_IMAGE_TEMPLATES,
                 video_templates: Sequence[str] = DEFAULT_VIDEO_TEMPLATES,
                 template_cycling: bool = False) -> Corpus:
    """
    Deterministic procedural corpus of coloured shapes.

    Each class has its own colour/shape pair and, for videos, its own motion
    direction. ``video_fraction`` of each class's samples are videos of
    ``video_T`` frames; ``held_out_per_class`` extra samples per class and
    modality are marked ``split="test"``.
    """
    if min(n_classes, n_per_class, image_size, video_T) < 1:
        raise ArgumentError("synthetic corpus sizes must be at least 1")
    if n_classes > MAX_SYNTH_CLASSES:
        raise ArgumentError(f"at most {MAX_SYNTH_CLASSES} synthetic classes, got {n_classes}")
    if not 0.0 <= video_fraction <= 1.0:
        raise ArgumentError(f"video_fraction must lie in [0, 1], got {video_fraction}")

    rng = np.random.default_rng(seed)
    labels = LabelIndex()
    templates = {"image": image_templates, "video": video_templates}
    n_video = int(round(n_per_class * video_fraction))
    counts = {"image": n_per_class - n_video, "video": n_video}

    triplets = []
    for split, per_modality in (("train", counts),
                                ("test", {m: held_out_per_class if c else 0 for m, c in counts.items()})):
        for c in range(n_classes):
            name = synth_class_name(c)
            for modality in MODALITIES:
                for _ in range(per_modality[modality]):
                    T = 1 if modality == "image" else video_T
                    frames = render_frames(c, image_size, T, rng)
                    text = label_to_text(name, templates[modality])
                    triplets.append(Triplet(frames, labels.for_class(modality, name), text, modality,
                                            class_name=name, split=split))

    logger.info(f"Synthesized {len(triplets)} triplets ({n_classes} classes, seed {seed})")
    return Corpus(triplets, image_templates, video_templates, template_cycling)


def load_corpus(corpus_cfg) -> Corpus:
    """Corpus from the configured manifest, or the procedural corpus when none is set."""
    if corpus_cfg.manifest:
        return load_manifest(corpus_cfg.manifest, corpus_cfg)

    synth = corpus_cfg.synth
    corpus = synth_corpus(seed=synth.seed, n_classes=synth.n_classes, n_per_class=synth.n_per_class,
                          image_size=synth.image_size, video_T=synth.video_T,
                          video_fraction=synth.video_fraction,
                          held_out_per_class=synth.held_out_per_class,
                          image_templates=corpus_cfg.image_templates,
                          video_templates=corpus_cfg.video_templates,
                          template_cycling=corpus_cfg.template_cycling)
    if corpus_cfg.exclude_label_data:
        corpus = corpus.subset(i for i, t in enumerate(corpus) if not t.is_label_data)
        if not len(corpus):
            logger.warning("Excluding label data left the synthetic corpus empty")
    return corpus


# ----------------------------------------------------------------------------
# QA pairs, vocabulary and batches
# ----------------------------------------------------------------------------

@dataclass
class QAPair:
    index: int
    question: str
    answer: str


def make_qa_pairs(corpus: Corpus) -> List[QAPair]:
    """Shape and colour questions for every synthetic sample, plus motion for videos."""
    pairs = []
    for i, triplet in enumerate(corpus):
        attributes = class_attributes(triplet.class_name) if triplet.class_name else None
        if attributes is None:
            continue
        pairs.append(QAPair(i, QUESTION_SHAPE, attributes["shape"]))
        pairs.append(QAPair(i, QUESTION_COLOR, attributes["color"]))
        if triplet.modality == "video":
            pairs.append(QAPair(i, QUESTION_MOTION, attributes["direction"]))
    return pairs


def build_vocabulary(corpus: Corpus, extra_texts: Iterable[str] = ()) -> Vocabulary:
    """Closed vocabulary over every corpus text, the QA texts and ``extra_texts``."""
    texts = corpus.all_texts()
    texts.extend([QUESTION_SHAPE, QUESTION_COLOR, QUESTION_MOTION])
    texts.extend(SYNTH_SHAPES)
    texts.extend(SYNTH_COLORS)
    texts.extend(SYNTH_DIRECTIONS)
    texts.extend(extra_texts)
    return Vocabulary.build(texts)


@dataclass
class TripletBatch:
    frames: torch.Tensor
    text: TokenSequence
    y: torch.Tensor
    modality: str
    indices: List[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.frames.shape[0]

    def to(self, device) -> "TripletBatch":
        return TripletBatch(self.frames.to(device), self.text.to(device), self.y.to(device),
                            self.modality, self.indices)


def stack_frames(corpus: Corpus, indices: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    arrays = [corpus[i].load() for i in indices]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ArgumentError(f"cannot batch samples of different shapes: {sorted(shapes)}")
    return torch.from_numpy(np.stack(arrays)).to(dtype)


def make_batch(corpus: Corpus, indices: Sequence[int], vocab: Vocabulary, text_len: int,
               epoch: int = 0, dtype: torch.dtype = torch.float32) -> TripletBatch:
    """Stack one single-modality batch. Texts are [CLS]-led and closed by [EOS]."""
    if not indices:
        raise ArgumentError("empty batch")
    modalities = {corpus[i].modality for i in indices}
    if len(modalities) != 1:
        raise ArgumentError(f"batch mixes modalities: {sorted(modalities)}")

    texts = [corpus.text_of(i, epoch) for i in indices]
    return TripletBatch(
        frames=stack_frames(corpus, indices, dtype),
        text=tokenize_batch(texts, vocab, text_len, add_eos=True),
        y=torch.tensor([corpus[i].y for i in indices], dtype=torch.long),
        modality=modalities.pop(),
        indices=list(indices),
    )
