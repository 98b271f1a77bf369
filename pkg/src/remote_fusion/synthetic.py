"""Synthetic text-image samples with planted relation rules.

Relations (ids follow ``RunConfig.relations``):

* ``co_mentioned`` (entity, entity): a trigger token occurs in the sentence.
  In the ``low_level`` variant it is instead the sentence register, a bit
  carried by the parity of every content token id.
* ``in_front_of`` (object, object): the head's depth grid is nearer (larger
  mean value) by more than ``DEPTH_MARGIN`` and the two boxes overlap.
* ``refers_to`` (entity, object): the entity token names the object, i.e. it
  matches the first token of the object's caption.

Content token ids are ``FIRST_CONTENT + 2 * base + register``. Captions are a
deterministic function of object attributes: ``[name, color word]``.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .encoder import FIRST_CONTENT, ConfigError, ObjectDescriptor, SampleRecord, assemble_text

DEPTH_MARGIN = 0.05
BOX = 0.3
COLORS = ("red", "green", "blue")
REQUIRED = ("co_mentioned", "in_front_of", "refers_to")


class Vocab:
    """Base-token layout: names, colors, fillers, triggers."""

    def __init__(self, n_names: int, n_fillers: int, n_triggers: int = 2):
        self.names = list(range(n_names))
        self.colors = list(range(n_names, n_names + 3))
        self.fillers = list(range(n_names + 3, n_names + 3 + n_fillers))
        self.triggers = list(range(n_names + 3 + n_fillers, n_names + 3 + n_fillers + n_triggers))
        self.n_base = n_names + 3 + n_fillers + n_triggers

    @property
    def size(self) -> int:
        return FIRST_CONTENT + 2 * self.n_base

    @staticmethod
    def token(base: int, register: int = 0) -> int:
        return FIRST_CONTENT + 2 * base + register

    @staticmethod
    def base(token: int) -> int:
        return (token - FIRST_CONTENT) // 2

    @staticmethod
    def register(token: int) -> int:
        return (token - FIRST_CONTENT) % 2


def _vocab(config: RunConfig) -> Vocab:
    s = config.synthetic
    v = Vocab(s.n_names, s.n_fillers_vocab)
    if v.size > config.vocab_size:
        raise ConfigError(f"synthetic vocabulary needs {v.size} ids, vocab_size is {config.vocab_size}")
    return v


def _relation_ids(config: RunConfig) -> dict:
    missing = [r for r in REQUIRED if r not in config.relations]
    if missing:
        raise ConfigError(f"relation vocabulary lacks planted relations: {', '.join(missing)}")
    return {name: config.relations.index(name) for name in REQUIRED}


def boxes_overlap(p, q) -> bool:
    return abs(p[0] - q[0]) < (p[2] + q[2]) / 2 and abs(p[1] - q[1]) < (p[3] + q[3]) / 2


def _make_object(rng, size: int, color: int, depth: float, position) -> ObjectDescriptor:
    rgb = 0.1 + 0.05 * rng.random((size, size, 3))
    rgb[..., color] = 0.8 + 0.1 * rng.random((size, size))
    dep = np.clip(depth + 0.02 * rng.standard_normal((size, size)), 0.0, 1.0)
    return ObjectDescriptor(np.round(rgb, 4), np.round(dep, 4), tuple(round(float(v), 4) for v in position))


def _object_layout(rng, n_objects: int):
    """Depth levels at least 0.3 apart and boxes that either clearly overlap or clearly don't."""
    depths = rng.permutation(np.linspace(0.15, 0.85, max(n_objects, 3)))[:n_objects]
    cx0 = rng.uniform(0.2, 0.8)
    cy = rng.uniform(0.3, 0.7)
    positions = [(cx0, cy, BOX, BOX)]
    for _ in range(1, n_objects):
        if rng.random() < 0.5:
            cx = float(np.clip(positions[0][0] + rng.uniform(-0.12, 0.12), 0.15, 0.85))
        else:
            cx = positions[0][0] + 0.5 if positions[0][0] < 0.5 else positions[0][0] - 0.5
        positions.append((cx, float(cy + rng.uniform(-0.05, 0.05)), BOX, BOX))
    return depths, positions


def generate_synthetic(config: RunConfig, n_samples: int, seed: int) -> list[SampleRecord]:
    s = config.synthetic
    if n_samples < 0:
        raise ConfigError("n_samples must be non-negative")
    if s.n_objects < 1 or s.n_entities < 1:
        raise ConfigError("synthetic samples need at least one entity and one object")
    if s.n_objects > config.max_objects:
        raise ConfigError(f"n_objects={s.n_objects} exceeds max_objects={config.max_objects}")
    if s.n_entities > s.n_names or s.n_objects > s.n_names:
        raise ConfigError("not enough distinct names for entities/objects")
    if s.image_size % config.patch_size:
        raise ConfigError(f"image_size {s.image_size} not divisible by patch_size {config.patch_size}")
    vocab = _vocab(config)
    _relation_ids(config)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_samples):
        sid = f"{s.variant}-{seed}-{i:06d}"
        register = int(rng.integers(2)) if s.variant == "low_level" else 0
        tok = lambda base: vocab.token(base, register)  # noqa: E731

        obj_names = rng.choice(vocab.names, size=s.n_objects, replace=False)
        ent_names = []
        for _ in range(s.n_entities):
            if rng.random() < 0.5:
                pool = [n for n in obj_names if n not in ent_names]
            else:
                pool = [n for n in vocab.names if n not in ent_names]
            ent_names.append(int(rng.choice(pool if pool else [n for n in vocab.names if n not in ent_names])))

        raw = [tok(int(b)) for b in rng.choice(vocab.fillers, size=s.n_filler)]
        if s.variant == "default" and rng.random() < 0.5:
            raw[int(rng.integers(len(raw)))] = tok(int(rng.choice(vocab.triggers)))
        slots = sorted(rng.choice(len(raw) + 1, size=s.n_entities, replace=False))
        entities, built, prev = [None] * s.n_entities, [], 0
        order = rng.permutation(s.n_entities)
        for k, slot in enumerate(slots):
            built.extend(raw[prev:slot])
            idx = int(order[k])
            entities[idx] = (len(built), len(built) + 1)
            built.append(tok(ent_names[idx]))
            prev = slot
        built.extend(raw[prev:])

        depths, positions = _object_layout(rng, s.n_objects)
        objects, captions = [], []
        for k in range(s.n_objects):
            color = int(rng.integers(3))
            objects.append(_make_object(rng, s.image_size, color, float(depths[k]), positions[k]))
            captions.append([tok(int(obj_names[k])), tok(vocab.colors[color])])

        tokens, espans, cspans = assemble_text(built, entities, captions, config.max_tokens, sid)
        rec = SampleRecord(sid, tokens, espans, cspans, objects, [])
        rec.gold_triplets = check_rules(rec, config)
        records.append(rec)
    return records


def check_rules(rec: SampleRecord, config: RunConfig) -> list[tuple[str, str, int]]:
    """Re-derive the planted gold triplets from a record's raw content."""
    rel = _relation_ids(config)
    variant = config.synthetic.variant
    vocab = _vocab(config)
    out = []
    content = [t for t in rec.tokens if t >= FIRST_CONTENT]
    ent_base = [Vocab.base(rec.tokens[s]) for s, _ in rec.entity_spans]
    if variant == "low_level":
        related = all(Vocab.register(t) == 1 for t in content)
    else:
        related = any(Vocab.base(t) in vocab.triggers for t in content)
    if related:
        for i in range(len(ent_base)):
            for j in range(len(ent_base)):
                if i != j:
                    out.append((f"e{i}", f"e{j}", rel["co_mentioned"]))
    depth = [float(o.depth.mean()) for o in rec.objects]
    for a, oa in enumerate(rec.objects):
        for b, ob in enumerate(rec.objects):
            if a != b and depth[a] > depth[b] + DEPTH_MARGIN and boxes_overlap(oa.position, ob.position):
                out.append((f"o{a}", f"o{b}", rel["in_front_of"]))
    for i, eb in enumerate(ent_base):
        for k, (s, _) in enumerate(rec.caption_spans):
            if Vocab.base(rec.tokens[s]) == eb:
                out.append((f"e{i}", f"o{k}", rel["refers_to"]))
    return out


def default_task_config(**changes) -> RunConfig:
    """Desk-scale configuration used by the learnability run."""
    base = RunConfig(vocab_size=Vocab(6, 12).size)
    return base.replace(**changes) if changes else base
