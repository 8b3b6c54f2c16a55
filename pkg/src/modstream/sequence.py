"""Streams of frames and text, and their interleaved token layout."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union

import numpy as np

EOS_ID = 0  # "stay silent" target at frame ends
EOR_ID = 1  # closes every response span


class SequenceError(ValueError):
    pass


class TokenRole(enum.IntEnum):
    VISION_PATCH = 0
    FRAME_LAST = 1
    TEXT_PROMPT = 2
    TEXT_RESPONSE = 3

    @property
    def is_vision(self) -> bool:
        return self in (TokenRole.VISION_PATCH, TokenRole.FRAME_LAST)


@dataclass(frozen=True)
class Frame:
    frame_id: int
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class TextSpan:
    tokens: tuple[int, ...]
    kind: str  # "prompt" | "response"
    anchored_after_frame: int


Event = Union[Frame, TextSpan]


@dataclass
class StreamSample:
    events: list[Event]
    duration: int

    @property
    def frames(self) -> list[Frame]:
        return [e for e in self.events if isinstance(e, Frame)]

    @property
    def spans(self) -> list[TextSpan]:
        return [e for e in self.events if isinstance(e, TextSpan)]

    def validate(self, frame_token_count: int | None = None) -> None:
        frames = self.frames
        if not self.events:
            raise SequenceError("empty sample")
        ids = [f.frame_id for f in frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise SequenceError("frame ids must be strictly increasing")
        known = set(ids)
        for f in frames:
            if frame_token_count is not None and len(f.tokens) != frame_token_count:
                raise SequenceError(
                    f"frame {f.frame_id} has {len(f.tokens)} tokens, expected {frame_token_count}")
        for s in self.spans:
            if s.kind not in ("prompt", "response"):
                raise SequenceError(f"unknown span kind {s.kind!r}")
            if not s.tokens:
                raise SequenceError("empty text span")
            if s.anchored_after_frame not in known:
                raise SequenceError(f"span anchored after unknown frame {s.anchored_after_frame}")
            if s.kind == "response" and s.tokens[-1] != EOR_ID:
                raise SequenceError("response span must end with the end-of-response token")

    def to_record(self) -> dict:
        events = []
        for e in self.events:
            if isinstance(e, Frame):
                events.append({"type": "frame", "frame_id": e.frame_id, "tokens": list(e.tokens)})
            else:
                events.append({"type": "text", "anchor": e.anchored_after_frame,
                               "kind": e.kind, "tokens": list(e.tokens)})
        return {"duration": self.duration, "events": events}

    @classmethod
    def from_record(cls, rec: dict) -> StreamSample:
        events: list[Event] = []
        for ev in rec["events"]:
            if ev["type"] == "frame":
                events.append(Frame(int(ev["frame_id"]), tuple(int(t) for t in ev["tokens"])))
            elif ev["type"] == "text":
                events.append(TextSpan(tuple(int(t) for t in ev["tokens"]), ev["kind"], int(ev["anchor"])))
            else:
                raise SequenceError(f"unknown event type {ev['type']!r}")
        return cls(events=events, duration=int(rec["duration"]))


def canonical_order(frames: Iterable[Frame], spans: Iterable[TextSpan]) -> list[Event]:
    """Frames in id order, each followed by the spans anchored to it (stable)."""
    by_anchor: dict[int, list[TextSpan]] = {}
    for s in spans:
        by_anchor.setdefault(s.anchored_after_frame, []).append(s)
    events: list[Event] = []
    for f in sorted(frames, key=lambda f: f.frame_id):
        events.append(f)
        events.extend(by_anchor.get(f.frame_id, []))
    return events


@dataclass
class InterleavedSequence:
    token_ids: np.ndarray
    roles: np.ndarray  # TokenRole values
    frame_of: np.ndarray  # frame id, -1 for text
    positions: np.ndarray
    lm_indicator: np.ndarray  # l
    stream_indicator: np.ndarray  # s
    targets: np.ndarray  # next token id, -1 at the end
    span_of: np.ndarray = field(default=None)  # span ordinal, -1 for vision
    frame_token_count: int = 0

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def is_vision(self) -> np.ndarray:
        return (self.roles == TokenRole.VISION_PATCH) | (self.roles == TokenRole.FRAME_LAST)

    def copy(self) -> InterleavedSequence:
        return InterleavedSequence(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                                      for k, v in self.__dict__.items()})


def compute_labels(roles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The LM indicator ``l`` and the streaming-EOS indicator ``s``.

    ``l[j]`` marks response tokens; ``s[j]`` marks frame-last tokens not
    followed by a response token (the token past the end counts as l=0).
    """
    lm = (roles == TokenRole.TEXT_RESPONSE).astype(np.int8)
    nxt = np.append(lm[1:], 0)
    st = ((roles == TokenRole.FRAME_LAST) & (nxt == 0)).astype(np.int8)
    return lm, st


def interleave(sample: StreamSample, frame_token_count: int,
               vocab_size: int | None = None) -> InterleavedSequence:
    """Lay out a sample as one causal token stream with Eq.-style labels."""
    if frame_token_count < 1:
        raise SequenceError("frame_token_count must be positive")
    sample.validate(frame_token_count)
    spans = sample.spans
    events = canonical_order(sample.frames, spans)
    span_index = {id(s): i for i, s in enumerate(spans)}

    ids: list[int] = []
    roles: list[int] = []
    frame_of: list[int] = []
    span_of: list[int] = []
    for ev in events:
        if isinstance(ev, Frame):
            ids.extend(ev.tokens)
            roles.extend([TokenRole.VISION_PATCH] * (frame_token_count - 1) + [TokenRole.FRAME_LAST])
            frame_of.extend([ev.frame_id] * frame_token_count)
            span_of.extend([-1] * frame_token_count)
        else:
            role = TokenRole.TEXT_RESPONSE if ev.kind == "response" else TokenRole.TEXT_PROMPT
            ids.extend(ev.tokens)
            roles.extend([role] * len(ev.tokens))
            frame_of.extend([-1] * len(ev.tokens))
            span_of.extend([span_index[id(ev)]] * len(ev.tokens))

    token_ids = np.asarray(ids, dtype=np.int64)
    if vocab_size is not None and token_ids.size and (token_ids.min() < 0 or token_ids.max() >= vocab_size):
        raise SequenceError("token id outside the vocabulary")
    role_arr = np.asarray(roles, dtype=np.int8)
    lm, st = compute_labels(role_arr)
    targets = np.append(token_ids[1:], -1)
    return InterleavedSequence(
        token_ids=token_ids,
        roles=role_arr,
        frame_of=np.asarray(frame_of, dtype=np.int64),
        positions=np.arange(len(ids), dtype=np.int64),
        lm_indicator=lm,
        stream_indicator=st,
        targets=targets,
        span_of=np.asarray(span_of, dtype=np.int64),
        frame_token_count=frame_token_count,
    )


def flatten_frames(seq: InterleavedSequence) -> list[tuple[int, range]]:
    """``(frame id, token index range)`` for each frame, in stream order."""
    out: list[tuple[int, range]] = []
    vision = np.flatnonzero(seq.is_vision)
    if vision.size == 0:
        return out
    breaks = np.flatnonzero((np.diff(vision) != 1) | (np.diff(seq.frame_of[vision]) != 0)) + 1
    for chunk in np.split(vision, breaks):
        out.append((int(seq.frame_of[chunk[0]]), range(int(chunk[0]), int(chunk[-1]) + 1)))
    return out


def write_samples(path, samples: Iterable[StreamSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def read_samples(path) -> Iterator[StreamSample]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield StreamSample.from_record(json.loads(line))
