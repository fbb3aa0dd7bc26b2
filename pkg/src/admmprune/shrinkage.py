"""Physical buffer compaction and recovery for masked conv tensors.

A globally agreed mask induces kept output-filter and input-channel index
sets; slicing along those sets packs the tensor into a contiguous compact
buffer that dense collectives can handle without any index metadata.
Recovery scatters the compact values back into a zero-filled full tensor.
Fully connected layers travel dense and are never shrunk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, ShapeError
from .tensors import LayerKind, LayerSpec


@dataclass(frozen=True)
class KeepIndexSets:
    """Sorted kept indices along the output-filter and input-channel dims."""

    layer: str
    k_out: tuple[int, ...]
    k_in: tuple[int, ...]
    kernel: tuple[int, int]

    @property
    def compact_shape(self) -> tuple[int, int, int, int]:
        return (len(self.k_out), len(self.k_in), self.kernel[0], self.kernel[1])

    @property
    def elements(self) -> int:
        return len(self.k_out) * len(self.k_in) * self.kernel[0] * self.kernel[1]


@dataclass(frozen=True)
class CompactBuffer:
    layer: str
    shape: tuple[int, int, int, int]
    data: np.ndarray  # contiguous, matches shape


def derive_keep_sets(mask: np.ndarray, layer: LayerSpec) -> KeepIndexSets:
    """Kept indices: a filter/channel survives iff any bit in its slice is set."""
    if layer.kind is not LayerKind.CONV:
        raise ShapeError(f"layer {layer.name}: only conv layers are shrunk")
    if mask.shape != layer.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match layer {layer.shape}")
    k_out = np.flatnonzero(mask.any(axis=(1, 2, 3)))
    k_in = np.flatnonzero(mask.any(axis=(0, 2, 3)))
    return KeepIndexSets(
        layer=layer.name,
        k_out=tuple(int(i) for i in k_out),
        k_in=tuple(int(i) for i in k_in),
        kernel=(layer.shape[2], layer.shape[3]),
    )


def compress(dense: np.ndarray, keep: KeepIndexSets) -> CompactBuffer:
    """Slice the kept rectangle out of a full conv tensor into contiguous memory."""
    if dense.ndim != 4:
        raise ShapeError(f"compress needs a rank-4 tensor, got rank {dense.ndim}")
    out_idx = np.asarray(keep.k_out, dtype=np.intp)
    in_idx = np.asarray(keep.k_in, dtype=np.intp)
    data = np.ascontiguousarray(dense[np.ix_(out_idx, in_idx)])
    return CompactBuffer(layer=keep.layer, shape=keep.compact_shape, data=data)


def decompress(compact: CompactBuffer, keep: KeepIndexSets, full_shape: tuple[int, ...]) -> np.ndarray:
    """Zero-filled full tensor with compact values scattered onto kept coordinates."""
    if compact.data.shape != keep.compact_shape:
        raise ShapeError(
            f"compact shape {compact.data.shape} inconsistent with keep sets {keep.compact_shape}"
        )
    full = np.zeros(full_shape, dtype=np.float64)
    if keep.elements:
        out_idx = np.asarray(keep.k_out, dtype=np.intp)
        in_idx = np.asarray(keep.k_in, dtype=np.intp)
        full[np.ix_(out_idx, in_idx)] = compact.data
    return full


def rectangle_mask(keep: KeepIndexSets, full_shape: tuple[int, ...]) -> np.ndarray:
    """Indicator of the kept k_out x k_in rectangle (all kernel positions)."""
    ind = np.zeros(full_shape, dtype=bool)
    if keep.elements:
        out_idx = np.asarray(keep.k_out, dtype=np.intp)
        in_idx = np.asarray(keep.k_in, dtype=np.intp)
        ind[np.ix_(out_idx, in_idx)] = True
    return ind


def shrunk_payload_elements(keep: KeepIndexSets, layer: LayerSpec) -> int:
    if layer.kind is not LayerKind.CONV:
        raise ShapeError(f"layer {layer.name}: only conv layers are shrunk")
    return keep.elements


class KeepSetCache:
    """Per-leader keep-set cache keyed by layer name.

    While masks are still evolving, a lookup re-derives the sets whenever
    the mask bits changed. After :meth:`seal` (mask freeze) every lookup is
    a pure cache hit and re-derivation is a protocol violation.
    """

    def __init__(self):
        self._entries: dict[str, tuple[bytes, KeepIndexSets]] = {}
        self.derive_calls = 0
        self.hits = 0
        self.sealed = False

    def get(self, layer: LayerSpec, mask: np.ndarray) -> KeepIndexSets:
        if self.sealed:
            entry = self._entries.get(layer.name)
            if entry is None:
                raise ProtocolError(f"sealed cache has no keep sets for layer {layer.name}")
            self.hits += 1
            return entry[1]
        fingerprint = np.asarray(mask, dtype=bool).tobytes()
        entry = self._entries.get(layer.name)
        if entry is not None and entry[0] == fingerprint:
            self.hits += 1
            return entry[1]
        keep = derive_keep_sets(mask, layer)
        self.derive_calls += 1
        self._entries[layer.name] = (fingerprint, keep)
        return keep

    def seal(self) -> None:
        self.sealed = True
