"""Synthetic moving-shapes benchmark and the tagged-caption grammar.

Videos are colored shapes (circle, square, triangle) moving linearly over a
black background with z-order occlusion. Each video ships with per-entity
visible masks, per-frame scene graphs built from geometric predicates, a
templated caption whose entity noun phrases are wrapped in ⟨SEG_C⟩/⟨SEG_S⟩
tags, and the binary matrix tying caption positions to entities.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graphs import Edge, Node, PromptBox, SceneGraph, graph_from_dict, graph_to_dict
from .heads import (EOS, BOS, SEG_C_CLOSE, SEG_C_OPEN, SEG_S_CLOSE,
                    SEG_S_OPEN, Vocabulary)
from .rle import rle_decode, rle_encode
from .tensorio import read_tensor, write_tensor

SHAPES = ("circle", "square", "triangle")
COLORS = (
    ("red", (1.0, 0.15, 0.15)),
    ("green", (0.15, 0.9, 0.2)),
    ("blue", (0.2, 0.3, 1.0)),
    ("yellow", (0.95, 0.9, 0.1)),
    ("magenta", (0.9, 0.2, 0.9)),
    ("cyan", (0.15, 0.9, 0.9)),
)
PREDICATES = ("touching", "moving-toward", "left-of", "above")

# verb phrase used when the prompt is subject vs object of the predicate;
# every phrase is two tokens so tagged spans sit at fixed caption positions
RELATION_PHRASES = {
    ("touching", False): ["bumps", "into"],
    ("touching", True): ["bumps", "into"],
    ("moving-toward", False): ["moves", "toward"],
    ("moving-toward", True): ["drifts", "from"],
    ("left-of", False): ["left", "of"],
    ("left-of", True): ["right", "of"],
    ("above", False): ["floats", "above"],
    ("above", True): ["hangs", "below"],
}

TEMPLATE_WORDS = sorted(
    {w for phrase in RELATION_PHRASES.values() for w in phrase}
    | {"the", "and"}
)


def build_vocabulary():
    words = (["the", "and"]
             + [name for name, _ in COLORS]
             + list(SHAPES)
             + sorted({w for p in RELATION_PHRASES.values() for w in p}))
    return Vocabulary(words)


# ---------------------------------------------------------------------------
# tagged caption grammar


class CaptionGrammarError(ValueError):
    pass


class UnbalancedTagError(CaptionGrammarError):
    pass


class NestedTagError(CaptionGrammarError):
    pass


class CentralSpanError(CaptionGrammarError):
    pass


@dataclass(frozen=True)
class Span:
    start: int
    end: int           # exclusive, over content-token positions
    kind: str          # "central" | "association"
    entity_id: int     # caption-local entity index (appearance order)


@dataclass(frozen=True)
class SegCaption:
    tokens: tuple      # content tokens, tags stripped
    spans: tuple

    def __post_init__(self):
        centrals = [s for s in self.spans if s.kind == "central"]
        if len(centrals) != 1:
            raise CentralSpanError(f"{len(centrals)} central spans")
        prev_end = -1
        for s in sorted(self.spans, key=lambda s: s.start):
            if s.start >= s.end:
                raise CaptionGrammarError("empty span")
            if s.start < prev_end:
                raise CaptionGrammarError("overlapping spans")
            if s.end > len(self.tokens):
                raise CaptionGrammarError("span outside caption")
            prev_end = s.end

    def span_tokens(self, span):
        return list(self.tokens[span.start:span.end])


_OPEN = {SEG_C_OPEN: "central", SEG_S_OPEN: "association"}
_CLOSE = {SEG_C_CLOSE: "central", SEG_S_CLOSE: "association"}


def parse_seg_caption(text):
    """Whitespace tokenization; tags are stripped into spans.

    Tags may abut neighboring words without whitespace. Spans index content
    tokens. Tags must alternate open/close with no nesting; exactly one
    central span is required.
    """
    for tag in (SEG_C_CLOSE, SEG_S_CLOSE, SEG_C_OPEN, SEG_S_OPEN):
        text = text.replace(tag, f" {tag} ")
    tokens = []
    spans = []
    open_kind = None
    open_start = 0
    entity = 0
    for raw in text.split():
        if raw in _OPEN:
            if open_kind is not None:
                raise NestedTagError(f"{raw} inside an open span")
            open_kind = _OPEN[raw]
            open_start = len(tokens)
        elif raw in _CLOSE:
            if open_kind is None:
                raise UnbalancedTagError(f"{raw} without an open tag")
            if _CLOSE[raw] != open_kind:
                raise UnbalancedTagError(f"{raw} closes a {open_kind} span")
            spans.append(Span(open_start, len(tokens), open_kind, entity))
            entity += 1
            open_kind = None
        else:
            tokens.append(raw)
    if open_kind is not None:
        raise UnbalancedTagError("unclosed tag at end of caption")
    return SegCaption(tuple(tokens), tuple(spans))


def serialize_seg_caption(caption):
    """Exact inverse of parse_seg_caption."""
    openers = {"central": SEG_C_OPEN, "association": SEG_S_OPEN}
    closers = {"central": SEG_C_CLOSE, "association": SEG_S_CLOSE}
    opens = {s.start: s for s in caption.spans}
    closes = {s.end: s for s in caption.spans}
    parts = []
    for i, tok in enumerate(caption.tokens):
        if i in closes:
            parts.append(closers[closes[i].kind])
        if i in opens:
            parts.append(openers[opens[i].kind])
        parts.append(tok)
    n = len(caption.tokens)
    if n in closes:
        parts.append(closers[closes[n].kind])
    return " ".join(parts)


def build_y(caption, entity_order, length):
    """Binary (entities x positions) matrix from tagged spans.

    Row n flags the caption positions inside any span of entity_order[n];
    entities with no span get a zero row.
    """
    known = {s.entity_id for s in caption.spans}
    for eid in known:
        if eid not in entity_order:
            raise ValueError(f"span entity {eid} missing from entity order")
    y = np.zeros((len(entity_order), length))
    row_of = {eid: n for n, eid in enumerate(entity_order)}
    for span in caption.spans:
        y[row_of[span.entity_id], span.start:span.end] = 1.0
    return y


# ---------------------------------------------------------------------------
# geometry helpers


def bbox_from_mask(mask):
    """Tight (x0, y0, x1, y1) box, exclusive end, of the foreground."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask has no bounding box")
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _shape_mask(shape, cy, cx, size, height, width):
    ys, xs = np.mgrid[0:height, 0:width]
    if shape == "circle":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= size ** 2
    if shape == "square":
        return (np.abs(ys - cy) <= size) & (np.abs(xs - cx) <= size)
    if shape == "triangle":
        # upward triangle: widens linearly from apex at cy - size
        dy = ys - (cy - size)
        return (dy >= 0) & (dy <= 2 * size) & (np.abs(xs - cx) <= dy / 2.0)
    raise ValueError(f"unknown shape {shape!r}")


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    frames: int = 8
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 5
    min_size: int = 6
    max_size: int = 11
    max_speed: float = 2.5
    feature_dim: int = 32
    max_caption_entities: int = 3

    def __post_init__(self):
        if self.min_objects < 2 or self.max_objects < self.min_objects:
            raise ValueError("object count range invalid")
        if self.max_objects > len(COLORS):
            raise ValueError("not enough distinct colors")
        if self.frames < 1 or self.height < 16 or self.width < 16:
            raise ValueError("degenerate video size")


@dataclass
class EntityInfo:
    id: int
    shape: str
    color: str
    size: float
    positions: np.ndarray   # frames x 2 (cy, cx)
    velocity: np.ndarray    # (vy, vx)

    @property
    def phrase(self):
        return ["the", self.color, self.shape]


@dataclass
class AnnotatedVideo:
    frames: np.ndarray          # T x H x W x 3 in [0,1]
    masks: dict                 # entity id -> T x H x W bool (visible)
    scene_graphs: list
    caption: SegCaption
    caption_entities: list      # caption-local span index -> entity id
    y: np.ndarray               # caption entities x caption length
    prompt_entity: int
    prompt_box: PromptBox
    entities: list              # EntityInfo, z-order (last drawn on top)
    seed: int = 0

    @property
    def central_box(self):
        return self.prompt_box.box

    def association_boxes(self):
        """Frame-0 boxes of the non-central caption entities."""
        out = {}
        for eid in self.caption_entities[1:]:
            out[eid] = bbox_from_mask(self.masks[eid][0])
        return out


def encode_node_feature(shape, color, box, velocity, height, width, dim):
    """Shape/color one-hots plus normalized box and velocity, zero-padded."""
    feat = np.zeros(dim)
    feat[SHAPES.index(shape)] = 1.0
    feat[3 + [c for c, _ in COLORS].index(color)] = 1.0
    x0, y0, x1, y1 = box
    feat[9:13] = (x0 / width, y0 / height, x1 / width, y1 / height)
    feat[13:15] = (velocity[0] / 4.0, velocity[1] / 4.0)
    feat[15] = 1.0
    return feat


def encode_edge_feature(predicate, displacement, height, width, dim):
    feat = np.zeros(dim)
    feat[PREDICATES.index(predicate)] = 1.0
    feat[4:6] = (displacement[0] / height, displacement[1] / width)
    feat[6] = 1.0
    return feat


def _pair_predicate(a, b, box_a, box_b, frame):
    """First applicable predicate for the ordered pair (a, b), or None."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    gap_x = max(bx0 - ax1, ax0 - bx1)
    gap_y = max(by0 - ay1, ay0 - by1)
    if gap_x <= 1 and gap_y <= 1:
        return "touching"
    delta = b.positions[frame] - a.positions[frame]
    dist = np.linalg.norm(delta)
    speed = np.linalg.norm(a.velocity)
    if dist > 1e-9 and speed > 0.3:
        if float(delta @ a.velocity) / (dist * speed) > 0.5:
            return "moving-toward"
    if a.positions[frame][1] < b.positions[frame][1]:
        return "left-of"
    if a.positions[frame][0] < b.positions[frame][0]:
        return "above"
    return None


def predicate_holds(predicate, a, b, box_a, box_b, frame):
    """Direct geometric check that an emitted predicate is true."""
    if predicate == "touching":
        ax0, ay0, ax1, ay1 = box_a
        bx0, by0, bx1, by1 = box_b
        return max(bx0 - ax1, ax0 - bx1) <= 1 and max(by0 - ay1, ay0 - by1) <= 1
    if predicate == "left-of":
        return a.positions[frame][1] < b.positions[frame][1]
    if predicate == "above":
        return a.positions[frame][0] < b.positions[frame][0]
    if predicate == "moving-toward":
        delta = b.positions[frame] - a.positions[frame]
        dist = np.linalg.norm(delta)
        speed = np.linalg.norm(a.velocity)
        return (dist > 1e-9 and speed > 0.3
                and float(delta @ a.velocity) / (dist * speed) > 0.5)
    raise ValueError(f"unknown predicate {predicate!r}")


def _sample_entities(cfg, rng):
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    colors = rng.permutation(len(COLORS))[:count]
    entities = []
    for i in range(count):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        size = float(rng.uniform(cfg.min_size, cfg.max_size))
        margin = size + 1
        cy = float(rng.uniform(margin, cfg.height - margin))
        cx = float(rng.uniform(margin, cfg.width - margin))
        vel = rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)
        # keep the center inside the frame for the whole clip
        for axis, bound in ((0, cfg.height), (1, cfg.width)):
            end = [cy, cx][axis] + vel[axis] * (cfg.frames - 1)
            if end < margin or end > bound - margin:
                vel[axis] = -vel[axis]
                end = [cy, cx][axis] + vel[axis] * (cfg.frames - 1)
                if end < margin or end > bound - margin:
                    vel[axis] = (bound / 2 - [cy, cx][axis]) / max(cfg.frames - 1, 1)
        positions = np.array([
            (cy + vel[0] * t, cx + vel[1] * t) for t in range(cfg.frames)
        ])
        entities.append(EntityInfo(
            id=i, shape=shape, color=COLORS[int(colors[i])][0],
            size=size, positions=positions, velocity=np.asarray(vel),
        ))
    return entities


def _render(cfg, entities):
    color_of = dict(COLORS)
    frames = np.zeros((cfg.frames, cfg.height, cfg.width, 3))
    full = {
        e.id: np.stack([
            _shape_mask(e.shape, *e.positions[t], e.size,
                        cfg.height, cfg.width)
            for t in range(cfg.frames)
        ])
        for e in entities
    }
    visible = {}
    for t in range(cfg.frames):
        occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
        for e in reversed(entities):  # top of the z-order first
            vis = full[e.id][t] & ~occupied
            occupied |= full[e.id][t]
            visible.setdefault(e.id, np.zeros(
                (cfg.frames, cfg.height, cfg.width), dtype=bool))[t] = vis
            frames[t][vis] = color_of[e.color]
    return frames, visible


def _frame_graph(cfg, entities, visible, t):
    nodes, boxes = [], {}
    for e in entities:
        if not visible[e.id][t].any():
            continue
        box = bbox_from_mask(visible[e.id][t])
        boxes[e.id] = box
        nodes.append(Node(
            e.id, e.shape, box,
            encode_node_feature(e.shape, e.color, box, e.velocity,
                                cfg.height, cfg.width, cfg.feature_dim),
        ))
    edges = []
    present = [e for e in entities if e.id in boxes]
    for a in present:
        for b in present:
            if a.id == b.id:
                continue
            pred = _pair_predicate(a, b, boxes[a.id], boxes[b.id], t)
            if pred is None:
                continue
            disp = b.positions[t] - a.positions[t]
            edges.append(Edge(
                a.id, b.id, pred,
                encode_edge_feature(pred, disp, cfg.height, cfg.width,
                                    cfg.feature_dim),
            ))
    return SceneGraph(tuple(nodes), tuple(edges), t)


def _compose_caption(prompt, others, graph0):
    """Template: central phrase, then one relation clause per association."""
    pred_of = {}
    for e in graph0.edges:
        pred_of[(e.subject_id, e.object_id)] = e.predicate
    tokens = []
    spans = []
    entity_ids = [prompt.id]
    tokens.append(SEG_C_OPEN)
    tokens.extend(prompt.phrase)
    tokens.append(SEG_C_CLOSE)
    for k, other in enumerate(others):
        if k > 0:
            tokens.append("and")
        if (prompt.id, other.id) in pred_of:
            verb = RELATION_PHRASES[(pred_of[(prompt.id, other.id)], False)]
        else:
            verb = RELATION_PHRASES[(pred_of[(other.id, prompt.id)], True)]
        tokens.extend(verb)
        tokens.append(SEG_S_OPEN)
        tokens.extend(other.phrase)
        tokens.append(SEG_S_CLOSE)
        entity_ids.append(other.id)
    caption = parse_seg_caption(" ".join(tokens))
    return caption, entity_ids


def gen_video(cfg):
    """Deterministic per seed: shapes, masks, graphs, caption, alignment."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    for attempt in range(32):
        entities = _sample_entities(cfg, rng)
        frames, visible = _render(cfg, entities)
        always_visible = [
            e for e in entities
            if all(visible[e.id][t].any() for t in range(cfg.frames))
        ]
        if always_visible:
            break
    else:
        raise RuntimeError("could not place a persistently visible target")
    prompt = always_visible[int(rng.integers(len(always_visible)))]
    graphs = [_frame_graph(cfg, entities, visible, t)
              for t in range(cfg.frames)]
    others = [e for e in entities if e.id != prompt.id
              and visible[e.id][0].any()]
    # association clauses run left to right in frame 0 so the mention order
    # is recoverable from the video itself; the key is the frame-0 visible
    # bounding box centre, the same quantity the scene-graph nodes carry,
    # so the model-side node ordering can match it exactly
    def _frame0_center(e):
        x0, y0, x1, y1 = bbox_from_mask(visible[e.id][0])
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, e.id)

    others.sort(key=_frame0_center)
    others = others[:cfg.max_caption_entities - 1]
    caption, entity_ids = _compose_caption(prompt, others, graphs[0])
    y = build_y(
        caption,
        [s.entity_id for s in sorted(caption.spans, key=lambda s: s.start)],
        len(caption.tokens),
    )
    prompt_box = PromptBox(bbox_from_mask(visible[prompt.id][0]), 0)
    return AnnotatedVideo(
        frames=frames,
        masks=visible,
        scene_graphs=graphs,
        caption=caption,
        caption_entities=entity_ids,
        y=y,
        prompt_entity=prompt.id,
        prompt_box=prompt_box,
        entities=entities,
        seed=cfg.seed,
    )


def filter_prefix_frames(video, prompt_entity):
    """Drop frames before the prompt entity first becomes visible."""
    mask = video.masks.get(prompt_entity)
    if mask is None or not mask.any():
        raise ValueError(f"entity {prompt_entity} never appears")
    first = int(next(t for t in range(mask.shape[0]) if mask[t].any()))
    if first == 0:
        return video
    graphs = [
        SceneGraph(g.nodes, g.edges, g.frame_index - first)
        for g in video.scene_graphs[first:]
    ]
    return replace(
        video,
        frames=video.frames[first:],
        masks={k: v[first:] for k, v in video.masks.items()},
        scene_graphs=graphs,
    )


# ---------------------------------------------------------------------------
# dataset on disk


def save_video(directory, video):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "frames.sgt", video.frames)
    t, h, w = video.frames.shape[:3]
    masks_doc = {
        "shape": [t, h, w],
        "rle": {
            str(eid): [rle_encode(frame) for frame in m]
            for eid, m in video.masks.items()
        },
    }
    (directory / "masks.json").write_text(json.dumps(masks_doc))
    (directory / "graphs.json").write_text(json.dumps(
        [graph_to_dict(g) for g in video.scene_graphs]
    ))
    (directory / "caption.txt").write_text(serialize_seg_caption(video.caption))
    (directory / "y.json").write_text(json.dumps({
        "y": video.y.tolist(),
        "caption_entities": video.caption_entities,
    }))
    (directory / "meta.json").write_text(json.dumps({
        "seed": video.seed,
        "prompt_entity": video.prompt_entity,
        "prompt_box": list(video.prompt_box.box),
        "entities": [
            {
                "id": e.id, "shape": e.shape, "color": e.color,
                "size": e.size, "positions": e.positions.tolist(),
                "velocity": e.velocity.tolist(),
            }
            for e in video.entities
        ],
    }))


def load_video(directory):
    directory = Path(directory)
    frames = read_tensor(directory / "frames.sgt")
    masks_doc = json.loads((directory / "masks.json").read_text())
    shape = tuple(masks_doc["shape"])
    masks = {
        int(eid): np.stack([
            rle_decode(runs, shape[1:]) for runs in frame_runs
        ])
        for eid, frame_runs in masks_doc["rle"].items()
    }
    graphs = [graph_from_dict(d)
              for d in json.loads((directory / "graphs.json").read_text())]
    caption = parse_seg_caption((directory / "caption.txt").read_text())
    ydoc = json.loads((directory / "y.json").read_text())
    meta = json.loads((directory / "meta.json").read_text())
    entities = [
        EntityInfo(
            id=e["id"], shape=e["shape"], color=e["color"], size=e["size"],
            positions=np.asarray(e["positions"]),
            velocity=np.asarray(e["velocity"]),
        )
        for e in meta["entities"]
    ]
    return AnnotatedVideo(
        frames=frames,
        masks=masks,
        scene_graphs=graphs,
        caption=caption,
        caption_entities=list(ydoc["caption_entities"]),
        y=np.asarray(ydoc["y"]),
        prompt_entity=meta["prompt_entity"],
        prompt_box=PromptBox(tuple(meta["prompt_box"]), 0),
        entities=entities,
        seed=meta["seed"],
    )


def generate_dataset(out_dir, count, cfg, master_seed=0, split="train"):
    """Write count videos under out_dir and return manifest entries."""
    out_dir = Path(out_dir)
    entries = []
    for i in range(count):
        seed = int(np.random.default_rng([master_seed, i]).integers(2 ** 31))
        video = gen_video(replace(cfg, seed=seed))
        name = f"{split}_{i:05d}"
        save_video(out_dir / name, video)
        entries.append({"dir": name, "split": split, "seed": seed})
    return entries
