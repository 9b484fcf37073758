"""Pushdown automaton that yields valid-next-token masks for JSON records.

Every reachable state falls into one of a handful of *mask kinds* (expecting
START, a key or close, a value, an array element or close, ...). The mask of a
kind depends only on the vocabulary, so masks for a whole sequence are stored
as a small ``(n_kinds, |V|)`` table plus one kind id per position.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import TransitionError
from .tokenizer import (
    ARR_END,
    ARR_START,
    END,
    NUM,
    OBJ_END,
    OBJ_START,
    PAD,
    START,
    TokenStream,
    VocabSpec,
)

MAX_DEPTH = 128


class Mode(IntEnum):
    START = 0  # nothing consumed yet
    KEY = 1  # inside an object (or the record), expecting a key or the closer
    VALUE = 2  # a key was consumed, its value is due
    ELEM = 3  # inside an array, expecting an element or ARR_END
    DONE = 4  # END consumed


class MaskKind(IntEnum):
    EXPECT_START = 0
    ROOT_KEY = 1  # keys | END
    OBJ_KEY = 2  # keys | OBJ_END
    VALUE = 3  # values | NUM | OBJ_START | ARR_START
    VALUE_LEAF = 4  # values | NUM (depth limit reached)
    ELEM = 5  # VALUE | ARR_END
    ELEM_LEAF = 6  # VALUE_LEAF | ARR_END
    DONE = 7  # PAD only; never sampled


OBJECT, ARRAY = "O", "A"


@dataclass(frozen=True)
class PDAState:
    """Immutable parser state. ``stack`` is a persistent linked list
    ``(frame, parent)`` so :meth:`JsonGrammar.advance` is O(1)."""

    mode: Mode = Mode.START
    stack: tuple | None = None
    depth: int = 0

    @property
    def top(self) -> str | None:
        return self.stack[0] if self.stack else None

    @property
    def expecting_key(self) -> bool:
        return self.mode == Mode.KEY

    @property
    def expecting_value(self) -> bool:
        return self.mode in (Mode.VALUE, Mode.ELEM)

    @property
    def at_record_start(self) -> bool:
        return self.mode == Mode.START

    @property
    def at_record_end(self) -> bool:
        return self.mode == Mode.DONE

    def frames(self) -> list[str]:
        out, node = [], self.stack
        while node:
            out.append(node[0])
            node = node[1]
        return out[::-1]

    def __repr__(self) -> str:
        return f"PDAState({self.mode.name}, stack={''.join(self.frames()) or '-'})"


def mask_kind(state: PDAState) -> MaskKind:
    mode = state.mode
    if mode == Mode.START:
        return MaskKind.EXPECT_START
    if mode == Mode.KEY:
        return MaskKind.ROOT_KEY if state.depth == 0 else MaskKind.OBJ_KEY
    leaf = state.depth >= MAX_DEPTH
    if mode == Mode.VALUE:
        return MaskKind.VALUE_LEAF if leaf else MaskKind.VALUE
    if mode == Mode.ELEM:
        return MaskKind.ELEM_LEAF if leaf else MaskKind.ELEM
    return MaskKind.DONE


def init_state() -> PDAState:
    return PDAState()


class JsonGrammar:
    """Grammar masks over a fixed vocabulary."""

    def __init__(self, vocab: VocabSpec):
        self.vocab = vocab
        self._n_keys = len(vocab.keys)
        self.kind_table = self._build_kind_table(vocab)

    @staticmethod
    def _build_kind_table(vocab: VocabSpec) -> np.ndarray:
        V = vocab.size
        table = np.zeros((len(MaskKind), V), dtype=bool)
        keys, values = vocab.key_range, vocab.value_range
        table[MaskKind.EXPECT_START, START] = True
        table[MaskKind.ROOT_KEY, keys.start : keys.stop] = True
        table[MaskKind.ROOT_KEY, END] = True
        table[MaskKind.OBJ_KEY, keys.start : keys.stop] = True
        table[MaskKind.OBJ_KEY, OBJ_END] = True
        for kind in (MaskKind.VALUE, MaskKind.VALUE_LEAF, MaskKind.ELEM, MaskKind.ELEM_LEAF):
            table[kind, values.start : values.stop] = True
            table[kind, NUM] = True
        for kind in (MaskKind.VALUE, MaskKind.ELEM):
            table[kind, OBJ_START] = True
            table[kind, ARR_START] = True
        table[MaskKind.ELEM, ARR_END] = True
        table[MaskKind.ELEM_LEAF, ARR_END] = True
        table[MaskKind.DONE, PAD] = True
        return table

    init_state = staticmethod(init_state)

    def valid_next(self, state: PDAState) -> np.ndarray:
        return self.kind_table[mask_kind(state)]

    def allows(self, state: PDAState, token: int) -> bool:
        return 0 <= token < self.vocab.size and bool(self.kind_table[mask_kind(state), token])

    def advance(self, state: PDAState, token: int) -> PDAState:
        if not self.allows(state, token):
            raise TransitionError(state, token)
        mode, stack, depth = state.mode, state.stack, state.depth
        if mode == Mode.START:
            return PDAState(Mode.KEY, None, 0)
        if mode == Mode.KEY:
            if token == END:
                return PDAState(Mode.DONE, None, 0)
            if token == OBJ_END:
                return _after_value(stack[1], depth - 1)
            return PDAState(Mode.VALUE, stack, depth)
        # VALUE / ELEM
        if token == OBJ_START:
            return PDAState(Mode.KEY, (OBJECT, stack), depth + 1)
        if token == ARR_START:
            return PDAState(Mode.ELEM, (ARRAY, stack), depth + 1)
        if token == ARR_END:
            return _after_value(stack[1], depth - 1)
        return _after_value(stack, depth)

    def mask_kinds_for_sequence(self, tokens) -> np.ndarray:
        """Kind of the mask that governs token ``t + 1``, for every ``t``.

        The final position has no successor and gets ``DONE``.
        """
        kinds = np.empty(len(tokens), dtype=np.int64)
        state = init_state()
        for t, token in enumerate(tokens):
            try:
                state = self.advance(state, int(token))
            except TransitionError as exc:
                raise TransitionError(exc.state, exc.token, f"invalid stream at position {t}") from None
            kinds[t] = mask_kind(state)
        return kinds

    def masks_for_sequence(self, stream: TokenStream | list) -> np.ndarray:
        tokens = stream.tokens if isinstance(stream, TokenStream) else stream
        return self.kind_table[self.mask_kinds_for_sequence(tokens)]

    def shortest_completion(self, state: PDAState) -> int:
        """Length of the shortest token suffix that ends the record."""
        if state.mode == Mode.DONE:
            return 0
        if state.mode == Mode.START:
            return 2
        closes = state.depth + 1  # one closer per frame, then END
        return closes + (1 if state.mode == Mode.VALUE else 0)


def _after_value(stack, depth) -> PDAState:
    if stack is not None and stack[0] == ARRAY:
        return PDAState(Mode.ELEM, stack, depth)
    return PDAState(Mode.KEY, stack, depth)
