"""Reverse-mode autodiff tape.

Ops record onto the tape that is active on the current thread (entered via
`with ComputationTape():`). A tape belongs to one forward/backward pass;
independent passes on independent tapes may run concurrently.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from reattn.errors import ContractError
from reattn.tensor import Tensor


class Node:
    """One recorded primitive: inputs, output, and the adjoint rule.

    `backward` maps the output adjoint to one adjoint per input (None for
    inputs that do not require gradients).
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


_local = threading.local()


def active_tape() -> "ComputationTape | None":
    return getattr(_local, "tape", None)


class ComputationTape:
    """Ordered record of primitives, replayed once in reverse by `backward`."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self):
        if active_tape() is not None:
            raise ContractError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = None
        return False

    def record(self, node: Node):
        if self._consumed:
            raise ContractError("recording onto a consumed tape; call reset() first")
        self.nodes.append(node)

    def reset(self):
        self.nodes.clear()
        self._consumed = False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        """Accumulates the adjoint of `loss` into `.grad` of every
        requires_grad tensor recorded on this tape; recorded tensors that do
        not reach the loss get zeros. Replaying the same tape twice without
        `reset()` is a detected error.
        """
        if self._consumed:
            raise ContractError("tape already replayed; reset() before reusing it")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if self.nodes and id(loss) not in produced:
            raise ContractError("loss was not produced on this tape")
        self._consumed = True

        # Adjoint buffers are owned by this dict: entries are copied on first
        # store whenever the rule may have returned a view of (or the very
        # buffer of) the output adjoint, so in-place accumulation is safe.
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: dict[int, Tensor] = {}
        written: set[int] = set()
        if loss.requires_grad:
            touched[id(loss)] = loss

        for node in reversed(self.nodes):
            for t in node.inputs:
                if t.requires_grad:
                    touched[id(t)] = t
            if node.output.requires_grad:
                touched[id(node.output)] = node.output
            g_out = adjoints.pop(id(node.output), None)
            if g_out is None:
                continue
            # Reverse topological order: the output adjoint is complete here.
            if node.output.requires_grad and id(node.output) not in written:
                node.output.accumulate_grad(np.asarray(g_out, dtype=node.output.dtype))
                written.add(id(node.output))
            grads = node.backward(g_out)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                g = np.asarray(g)
                prev = adjoints.get(id(t))
                if prev is None:
                    if g is g_out or g.base is not None:
                        g = g.copy()
                    adjoints[id(t)] = g
                else:
                    prev += g

        for tid, t in touched.items():
            if tid in written:
                continue
            g = adjoints.get(tid)
            if g is None:
                g = np.zeros_like(t.data)
            t.accumulate_grad(np.asarray(g, dtype=t.dtype))
