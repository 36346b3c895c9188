"""Multimodal token layouts, vision token arithmetic and prefill block partitioning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, InvalidConfiguration

KINDS = ("text", "tile", "frame")
KIND_CODE = {k: i for i, k in enumerate(KINDS)}
DEFAULT_BLOCK_SIZE = 256


@dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    length: int
    structure_id: int | None = None

    @property
    def end(self) -> int:
        return self.start + self.length

    @property
    def is_visual(self) -> bool:
        return self.kind != "text"


@dataclass(frozen=True)
class Block:
    start: int
    end: int
    aligned: bool

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class TokenLayout:
    segments: tuple[Segment, ...]
    prompt_index: int

    def __post_init__(self):
        pos = 0
        for seg in self.segments:
            if seg.kind not in KIND_CODE:
                raise InvalidArgument(f"unknown segment kind {seg.kind!r}")
            if seg.length < 1:
                raise InvalidArgument(f"zero-length {seg.kind} segment at {seg.start}")
            if seg.start != pos:
                raise InvalidArgument("segments must tile the sequence contiguously")
            pos = seg.end
        if self.segments[self.prompt_index].kind != "text":
            raise InvalidArgument("prompt span must be a text segment")

    @classmethod
    def from_spans(cls, spans: Iterable[tuple[str, int]], prompt_index: int | None = None) -> "TokenLayout":
        """Build a layout from ``(kind, length)`` pairs.

        Tiles and frames are numbered per kind in order of appearance. When
        ``prompt_index`` is omitted the first text span is the prompt.
        """
        segs, pos, counters = [], 0, {"tile": 0, "frame": 0}
        for kind, length in spans:
            sid = None
            if kind in counters:
                sid = counters[kind]
                counters[kind] += 1
            segs.append(Segment(kind, pos, int(length), sid))
            pos += int(length)
        if not segs:
            raise InvalidArgument("layout needs at least one segment")
        if prompt_index is None:
            texts = [i for i, s in enumerate(segs) if s.kind == "text"]
            if not texts:
                raise InvalidArgument("layout has no text segment to act as prompt")
            prompt_index = texts[0]
        return cls(tuple(segs), prompt_index)

    @property
    def total_len(self) -> int:
        return self.segments[-1].end

    @property
    def prompt(self) -> Segment:
        return self.segments[self.prompt_index]

    @property
    def prompt_span(self) -> tuple[int, int]:
        return self.prompt.start, self.prompt.length

    @property
    def prompt_first(self) -> bool:
        return self.prompt.start == 0

    @property
    def vision_tokens(self) -> int:
        return sum(s.length for s in self.segments if s.is_visual)

    @property
    def max_segment_len(self) -> int:
        return max(s.length for s in self.segments)

    def visual_segments(self, kind: str | None = None) -> list[Segment]:
        return [s for s in self.segments if s.is_visual and (kind is None or s.kind == kind)]

    def find_segment(self, kind: str, structure_id: int) -> Segment:
        for s in self.segments:
            if s.kind == kind and s.structure_id == structure_id:
                return s
        raise InvalidArgument(f"no {kind} segment with id {structure_id}")

    def boundaries(self) -> set[int]:
        return {0} | {s.end for s in self.segments}

    def splits_structure(self, cut: int) -> bool:
        """True if ``cut`` falls strictly inside a tile or frame."""
        return any(s.is_visual and s.start < cut < s.end for s in self.segments)

    def kind_codes(self) -> np.ndarray:
        return np.concatenate([np.full(s.length, KIND_CODE[s.kind], dtype=np.int8) for s in self.segments])

    def structure_ids(self) -> np.ndarray:
        return np.concatenate(
            [np.full(s.length, -1 if s.structure_id is None else s.structure_id, dtype=np.int32)
             for s in self.segments]
        )

    def prompt_mask(self) -> np.ndarray:
        mask = np.zeros(self.total_len, dtype=bool)
        start, length = self.prompt_span
        mask[start:start + length] = True
        return mask


def vision_token_count(H: int, W: int, P: int) -> int:
    """Number of patch tokens for an ``H x W`` image with ``P x P`` patches.

    Each spatial dimension is floored separately, matching how a strided
    patch embedding drops the ragged border.
    """
    if P <= 0:
        raise InvalidArgument("patch size must be positive")
    if H <= 0 or W <= 0:
        raise InvalidArgument("image dimensions must be positive")
    return (H // P) * (W // P)


def build_layout(
    prompt_len: int,
    tiles: int = 0,
    tokens_per_tile: int = 256,
    frames: int = 0,
    tokens_per_frame: int = 256,
    prompt_position: str = "first",
) -> TokenLayout:
    if prompt_len < 1:
        raise InvalidArgument("prompt_len must be at least 1")
    if tiles < 0 or frames < 0:
        raise InvalidArgument("tile and frame counts must be nonnegative")
    if tiles and frames:
        raise InvalidArgument("build_layout takes tiles or frames, not both; use TokenLayout.from_spans to mix")
    if (tiles and tokens_per_tile < 1) or (frames and tokens_per_frame < 1):
        raise InvalidArgument("zero-length vision segments")
    if prompt_position not in ("first", "last"):
        raise InvalidArgument(f"prompt_position must be 'first' or 'last', got {prompt_position!r}")

    visual = [("tile", tokens_per_tile)] * tiles + [("frame", tokens_per_frame)] * frames
    if prompt_position == "first":
        return TokenLayout.from_spans([("text", prompt_len)] + visual, prompt_index=0)
    return TokenLayout.from_spans(visual + [("text", prompt_len)], prompt_index=len(visual))


def partition_blocks(layout: TokenLayout, b: int, align: str = "none", start: int = 0) -> list[Block]:
    """Split ``[start, total_len)`` into prefill blocks of at most ``b`` tokens.

    ``align="structure"`` packs whole segments greedily, so a tile or frame is
    never cut, and keeps the text prompt in a block of its own. It refuses
    ``b`` smaller than the longest segment.
    """
    if b < 1:
        raise InvalidArgument("block size must be >= 1")
    n = layout.total_len
    if not 0 <= start <= n:
        raise InvalidArgument(f"start {start} outside [0, {n}]")
    if align == "none":
        blocks = []
        for s in range(start, n, b):
            e = min(s + b, n)
            blocks.append(Block(s, e, not layout.splits_structure(e)))
        return blocks
    if align != "structure":
        raise InvalidArgument(f"align must be 'none' or 'structure', got {align!r}")

    if b < layout.max_segment_len:
        raise InvalidConfiguration(
            f"align=structure needs block size >= longest segment ({layout.max_segment_len}), got {b}"
        )
    if start not in layout.boundaries():
        raise InvalidConfiguration(f"start {start} is not a segment boundary")
    blocks, cur, end = [], start, start
    prompt = layout.prompt
    for seg in layout.segments:
        if seg.end <= start:
            continue
        # the prompt always gets a block of its own
        if end > cur and (seg.end - cur > b or seg == prompt or end == prompt.end):
            blocks.append(Block(cur, end, True))
            cur = end
        end = seg.end
    if end > cur:
        blocks.append(Block(cur, end, True))
    return blocks


def kv_memory_bytes(layers: int, heads: int, dim_head: int, precision_bytes: int, seq_len: int) -> int:
    """Modeled KV footprint: keys and values for every layer, head and token."""
    return 2 * layers * heads * dim_head * precision_bytes * seq_len
