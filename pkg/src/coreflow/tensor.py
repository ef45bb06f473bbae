"""Dense float64 tensors, labelled pairwise contraction, and tensor file I/O.

Tensors are plain ``numpy.ndarray`` values: C-order, float64, all entries
finite, and marked read-only once they leave this module.  Every operation is
a pure function returning a fresh array; any NaN/Inf raises NumericalError
immediately instead of propagating.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, LabelError, NumericalError, ShapeMismatch

Shape = tuple[int, ...]

_DTF1_MAGIC = b"DTF1"


def ensure_finite(arr: np.ndarray, context: str = "operation") -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{context} produced a non-finite value")


def as_tensor(values, shape: Shape | None = None) -> np.ndarray:
    """Validated tensor constructor: float64, C-order, finite, read-only."""
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if any(d < 1 for d in shape):
            raise ShapeMismatch(f"extents must be >= 1, got {shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if arr.size != count:
            raise ShapeMismatch(
                f"{arr.size} values cannot fill shape {shape} ({count} entries)"
            )
        arr = arr.reshape(shape)
    ensure_finite(arr, "tensor construction")
    arr.flags.writeable = False
    return arr


def _seal(arr: np.ndarray, context: str) -> np.ndarray:
    ensure_finite(arr, context)
    if getattr(arr, "ndim", 0) > 0:
        arr = np.ascontiguousarray(arr)
    else:
        arr = np.asarray(arr, dtype=np.float64)  # keep rank-0 rank-0
    arr.flags.writeable = False
    return arr


def require_same_shape(a: np.ndarray, b: np.ndarray, context: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{context} have shapes {a.shape} and {b.shape}")


@dataclass(frozen=True)
class ContractionPlan:
    """A labelled contraction, e.g. operands ("ij", "jk") with output "ik".

    Grammar: a label bound to exactly two operand slots is summed; a label
    appearing once is free and must appear in the output.  More than two
    occurrences are rejected, as is an output label that is bound or unknown.
    """

    operand_labels: tuple[str, ...]
    output_labels: str

    def __post_init__(self):
        if not self.operand_labels:
            raise LabelError("plan needs at least one operand")
        counts: dict[str, int] = {}
        for labels in self.operand_labels:
            for ch in labels:
                if not ch.isalpha():
                    raise LabelError(f"label {ch!r} is not a letter")
                counts[ch] = counts.get(ch, 0) + 1
        for ch, n in counts.items():
            if n > 2:
                raise LabelError(f"label {ch!r} appears {n} times (max 2)")
        out = self.output_labels
        if len(set(out)) != len(out):
            raise LabelError(f"output {out!r} repeats a label")
        for ch in out:
            if counts.get(ch, 0) == 0:
                raise LabelError(f"output label {ch!r} missing from operands")
            if counts[ch] == 2:
                raise LabelError(f"output label {ch!r} is bound (appears twice)")
        for ch, n in counts.items():
            if n == 1 and ch not in out:
                raise LabelError(f"free label {ch!r} missing from output")

    @classmethod
    def parse(cls, expression: str) -> "ContractionPlan":
        """Parse an ``"ij,jk->ik"`` style expression."""
        if "->" not in expression:
            raise LabelError(f"plan {expression!r} lacks '->'")
        lhs, out = expression.split("->", 1)
        return cls(tuple(lhs.split(",")), out)

    def expression(self) -> str:
        return ",".join(self.operand_labels) + "->" + self.output_labels


def _label_extents(plan: ContractionPlan, inputs: list[np.ndarray]) -> dict[str, int]:
    extents: dict[str, int] = {}
    for labels, arr in zip(plan.operand_labels, inputs):
        if arr.ndim != len(labels):
            raise ShapeMismatch(
                f"operand {labels!r} needs rank {len(labels)}, got shape {arr.shape}"
            )
        for ch, d in zip(labels, arr.shape):
            if extents.setdefault(ch, d) != d:
                raise ShapeMismatch(
                    f"label {ch!r} has extents {extents[ch]} and {d}"
                )
    return extents


def contract(plan: ContractionPlan, inputs: list[np.ndarray]) -> np.ndarray:
    """Evaluate the plan by pairwise reductions in left-to-right order.

    Each pairwise step is a tensordot over the labels the two operands share
    (a shared label is always bound, by the plan grammar, so it is summed the
    moment its partner arrives).  The fixed reduction order keeps results
    bit-deterministic across runs on one platform.
    """
    if len(inputs) != len(plan.operand_labels):
        raise ShapeMismatch(
            f"plan has {len(plan.operand_labels)} operands, got {len(inputs)}"
        )
    _label_extents(plan, inputs)

    # Collapse any within-operand repeated label to its diagonal first, so the
    # pairwise loop only ever sees distinct labels per operand.
    parts: list[tuple[str, np.ndarray]] = []
    for labels, arr in zip(plan.operand_labels, inputs):
        if len(set(labels)) != len(labels):
            dedup = "".join(dict.fromkeys(labels))
            arr = np.einsum(f"{labels}->{dedup}", arr)
            labels = dedup
        parts.append((labels, arr))

    out = plan.output_labels
    acc_labels, acc = parts[0]
    for nxt_labels, nxt in parts[1:]:
        shared = [ch for ch in acc_labels if ch in nxt_labels]
        axes_a = [acc_labels.index(ch) for ch in shared]
        axes_b = [nxt_labels.index(ch) for ch in shared]
        acc = np.tensordot(acc, nxt, axes=(axes_a, axes_b))
        acc_labels = (
            "".join(ch for ch in acc_labels if ch not in nxt_labels)
            + "".join(ch for ch in nxt_labels if ch not in shared)
        )
    # A label bound within a single operand (diagonal) may survive the loop
    # without a partner; it is summed here.  The rest is a permutation of the
    # free labels.
    extra = [ch for ch in acc_labels if ch not in out]
    if extra:
        acc = acc.sum(axis=tuple(acc_labels.index(ch) for ch in extra))
        acc_labels = "".join(ch for ch in acc_labels if ch in out)
    if acc_labels != out:
        acc = acc.transpose([acc_labels.index(ch) for ch in out])
    if out == "":
        acc = np.asarray(acc, dtype=np.float64)
    if any(acc is x for x in inputs):
        acc = acc.copy()
    return _seal(acc, f"contract {plan.expression()!r}")


def frobenius_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Entrywise inner product over all indices."""
    require_same_shape(a, b, "inner-product operands")
    value = float(np.dot(a.ravel(), b.ravel()))
    if not np.isfinite(value):
        raise NumericalError("inner product produced a non-finite value")
    return value


def frobenius_norm_sq(a: np.ndarray) -> float:
    """Sum of squares of all entries; same summation order as frobenius_inner."""
    return frobenius_inner(a, a)


def axpy_scale(a: np.ndarray, alpha: float, b: np.ndarray, beta: float) -> np.ndarray:
    """alpha*a + beta*b entrywise."""
    require_same_shape(a, b, "axpy operands")
    return _seal(alpha * a + beta * b, "axpy_scale")


# ----------------------------------------------------------------------------
# File formats: binary "DTF1" and CSV with a "# shape:" header line.
# ----------------------------------------------------------------------------

def write_dtf1(path, arr: np.ndarray) -> None:
    """Binary layout: magic "DTF1", u32 rank, rank x u64 extents, f64 values."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_DTF1_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(arr.tobytes(order="C"))


def read_dtf1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _DTF1_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    if len(raw) < offset + 8 * rank:
        raise FormatError(f"{path}: truncated extent list")
    dims = struct.unpack_from(f"<{rank}Q", raw, offset) if rank else ()
    offset += 8 * rank
    count = 1
    for d in dims:
        if d < 1:
            raise FormatError(f"{path}: extent {d} < 1")
        count *= d
    expected = offset + 8 * count
    if len(raw) < expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return as_tensor(values, tuple(int(d) for d in dims))


def write_csv_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# shape: " + ",".join(str(d) for d in arr.shape) + "\n")
        fh.write(",".join(repr(float(v)) for v in arr.ravel()) + "\n")


def read_csv_tensor(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = next((ln for ln in lines if ln.strip()), "")
    if not header.strip().startswith("# shape:"):
        raise FormatError(f"{path}: missing '# shape:' header line")
    spec = header.split(":", 1)[1].strip()
    try:
        dims = tuple(int(tok) for tok in spec.split(",") if tok.strip()) if spec else ()
    except ValueError as exc:
        raise FormatError(f"{path}: bad shape header {spec!r}") from exc
    values: list[float] = []
    for ln in lines:
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        for tok in ln.split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                values.append(float(tok))
            except ValueError as exc:
                raise FormatError(f"{path}: bad value {tok!r}") from exc
    try:
        return as_tensor(values, dims)
    except ShapeMismatch as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    """Load either format, sniffing the DTF1 magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == _DTF1_MAGIC:
        return read_dtf1(path)
    return read_csv_tensor(path)
