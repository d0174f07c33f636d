"""Dataset files, response files, config documents, and binary checkpoints.

Datasets use an inspectable coordinate text format: a header line
`N D NNZ` followed by NNZ lines `i d count` (zero-indexed, whitespace
separated, `#` starts a comment).  Checkpoints are binary for exact
float round-trips, with a textual magic/version line and a JSON header
in front of raw little-endian float64 blocks.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, DataFormatError, DomainError
from .inference import FitConfig, SviSchedule
from .model import BetaPosterior, CountMatrix, ModelConfig, RegressionParams, ThetaPosterior

__all__ = [
    "load_counts",
    "save_counts",
    "load_responses",
    "save_responses",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "load_config",
]

CHECKPOINT_MAGIC = "PFM-CHECKPOINT"
CHECKPOINT_VERSION = 1


def _data_lines(path):
    """Yield (line_no, tokens) for non-empty, non-comment content."""
    with open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                yield line_no, text.split()


def _parse_ints(tokens, expected, line_no, what):
    if len(tokens) != expected:
        raise DataFormatError(
            f"expected {expected} fields for {what}, got {len(tokens)}", line_no
        )
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise DataFormatError(f"non-integer value in {what}", line_no) from None


def load_counts(path):
    """Read a coordinate-format count matrix, validating every entry."""
    lines = _data_lines(path)
    try:
        line_no, tokens = next(lines)
    except StopIteration:
        raise DataFormatError("missing header line `N D NNZ`") from None
    n, d, nnz = _parse_ints(tokens, 3, line_no, "header")
    if n < 0 or d < 0 or nnz < 0:
        raise DataFormatError("header values must be nonnegative", line_no)
    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    counts = np.empty(nnz, dtype=np.int64)
    filled = 0
    for line_no, tokens in lines:
        if filled >= nnz:
            raise DataFormatError(
                f"more than the declared {nnz} entries", line_no
            )
        i, j, x = _parse_ints(tokens, 3, line_no, "entry")
        if not 0 <= i < n:
            raise DataFormatError(f"row index {i} out of range [0, {n})", line_no)
        if not 0 <= j < d:
            raise DataFormatError(f"column index {j} out of range [0, {d})", line_no)
        if x < 1:
            raise DataFormatError(f"count must be >= 1, got {x}", line_no)
        rows[filled], cols[filled], counts[filled] = i, j, x
        filled += 1
    if filled != nnz:
        raise DataFormatError(f"header declares {nnz} entries but file has {filled}")
    try:
        return CountMatrix(n, d, rows, cols, counts)
    except DomainError as exc:
        raise DataFormatError(str(exc)) from exc


def save_counts(data, path):
    """Write a CountMatrix in canonical coordinate form (row-major order)."""
    with open(path, "w") as fh:
        fh.write(f"{data.n_rows} {data.n_cols} {data.nnz}\n")
        for i, j, x in zip(data.rows, data.cols, data.counts):
            fh.write(f"{i} {j} {x}\n")


def load_responses(path, n_rows):
    """Read a response file: one real per row, N lines."""
    values = []
    for line_no, tokens in _data_lines(path):
        if len(tokens) != 1:
            raise DataFormatError("expected one value per line", line_no)
        try:
            values.append(float(tokens[0]))
        except ValueError:
            raise DataFormatError(f"non-numeric response {tokens[0]!r}", line_no) from None
    if len(values) != n_rows:
        raise DataFormatError(f"expected {n_rows} responses, found {len(values)}")
    return np.asarray(values, dtype=np.float64)


def save_responses(y, path):
    with open(path, "w") as fh:
        for v in np.asarray(y, dtype=np.float64):
            fh.write(f"{v!r}\n")


@dataclass(frozen=True)
class Checkpoint:
    """A fitted model state plus enough metadata to resume or evaluate it."""

    model_config: ModelConfig
    regression: RegressionParams
    theta: ThetaPosterior
    beta: BetaPosterior
    iterations: int
    final_elbo: float | None
    converged: bool
    version: int = CHECKPOINT_VERSION


def _array_bytes(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(ckpt, path):
    """Write a checkpoint; save/load/save is byte-identical."""
    mc = ckpt.model_config
    arrays = [
        ("eta", ckpt.regression.eta),
        ("theta_gamma", ckpt.theta.gamma),
        ("theta_chi", ckpt.theta.chi),
        ("beta_nu", ckpt.beta.nu),
        ("beta_lambda", ckpt.beta.lam),
    ]
    header = {
        "n_factors": mc.n_factors,
        "a": mc.a,
        "b": mc.b,
        "seed": mc.seed,
        "c": ckpt.regression.c,
        "sigma": ckpt.regression.sigma,
        "iterations": ckpt.iterations,
        "final_elbo": ckpt.final_elbo,
        "converged": ckpt.converged,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {ckpt.version}\n".encode())
        fh.write(json.dumps(header, sort_keys=True, allow_nan=False).encode() + b"\n")
        for _, arr in arrays:
            fh.write(_array_bytes(arr))


def _read_line(fh, what):
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return line[:-1]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = _read_line(fh, "magic line").decode(errors="replace").split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a poissonfm checkpoint")
        version = int(magic[1])
        if version > CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} is newer than supported "
                f"version {CHECKPOINT_VERSION}"
            )
        try:
            header = json.loads(_read_line(fh, "header").decode())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        data = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"truncated checkpoint in array {name!r}")
            data[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint arrays")
    mc = ModelConfig(header["n_factors"], header["a"], header["b"], header["seed"])
    reg = RegressionParams(data["eta"], header["sigma"], header["c"])
    theta = ThetaPosterior(data["theta_gamma"], data["theta_chi"])
    beta = BetaPosterior(data["beta_nu"], data["beta_lambda"])
    return Checkpoint(
        mc, reg, theta, beta, header["iterations"], header["final_elbo"],
        header["converged"], version,
    )


_MODEL_KEYS = {"n_factors", "a", "b", "seed"}
_FIT_KEYS = {"max_iters", "rel_tol", "mode", "schedule", "eval_every",
             "local_tol", "local_max_iters", "paper_moment"}
_SCHEDULE_KEYS = {"t0", "kappa", "batch_size"}


def load_config(path):
    """Parse a JSON config mirroring the ModelConfig and FitConfig fields.

    Returns (ModelConfig, FitConfig).  Unknown keys are rejected so typos
    fail loudly.
    """
    with open(path, "r") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON config: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataFormatError("config document must be a JSON object")
    unknown = set(doc) - _MODEL_KEYS - _FIT_KEYS
    if unknown:
        raise DataFormatError(f"unknown config keys: {sorted(unknown)}")
    if "n_factors" not in doc:
        raise DataFormatError("config must set n_factors")
    model_kwargs = {k: doc[k] for k in _MODEL_KEYS if k in doc}
    fit_kwargs = {k: doc[k] for k in _FIT_KEYS if k in doc}
    if "schedule" in fit_kwargs and fit_kwargs["schedule"] is not None:
        sched = fit_kwargs["schedule"]
        if not isinstance(sched, dict) or set(sched) - _SCHEDULE_KEYS:
            raise DataFormatError("schedule must be an object with t0, kappa, batch_size")
        fit_kwargs["schedule"] = SviSchedule(**sched)
    try:
        return ModelConfig(**model_kwargs), FitConfig(**fit_kwargs)
    except DomainError as exc:
        raise DataFormatError(f"invalid config value: {exc}") from exc
