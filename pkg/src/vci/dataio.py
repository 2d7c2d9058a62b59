"""Persistence: datasets, truth files, splits, checkpoints, manifests, reports
and estimates.

Text formats are comma-delimited UTF-8 with ``.`` decimals. Reals are written
with ``repr`` (shortest decimal that parses back to the same double), so every
text round-trip is value-exact. Checkpoints are binary; their layout is in
:func:`save_checkpoint`.
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .dataset import Dataset, SplitAssignment
from .evaluation import CELL_COLUMNS, ESTIMATOR_COLUMNS, EvalReport
from .exceptions import FormatError, ParseError
from .marginal import MarginalEstimate
from .model import PropensityTable, StratifiedOutcomeModel, VciNetwork
from .numerics import MlpParams
from .trainer import ModelBundle, TrainLog

MAGIC = b"VCI1"
CHECKPOINT_VERSION = 1
# A JSON header this large would describe a model far beyond desk scale; the
# cap stops a corrupt length field from triggering a huge allocation.
MAX_HEADER_BYTES = 1 << 26


def _real(v) -> str:
    return repr(float(v))


def _write_text(path, lines):
    # newline="" keeps "\n" line endings on every platform (byte reproducibility)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def dataset_header(dataset: Dataset, gene_names=None):
    genes = gene_names if gene_names is not None else [str(i) for i in range(dataset.n_genes)]
    return ([f"cov:{j}" for j in range(dataset.n_covariates)] + ["treatment"]
            + [f"g:{g}" for g in genes])


def _dataset_lines(X, T, Y, header):
    yield ",".join(header)
    for x, t, y in zip(X.tolist(), T.tolist(), Y.tolist()):
        yield ",".join([*map(str, x), str(t), *map(repr, y)])


def save_dataset(dataset: Dataset, path, outcomes=None):
    """Write ``dataset``; ``outcomes`` (same shape as ``Y``) replaces ``Y``,
    which is how truth files are written."""
    Y = dataset.Y if outcomes is None else np.asarray(outcomes, dtype=np.float64)
    if Y.shape != dataset.Y.shape:
        raise ValueError(f"outcomes shape {Y.shape} != dataset shape {dataset.Y.shape}")
    _write_text(path, _dataset_lines(dataset.X, dataset.T, Y, dataset_header(dataset)))


def truth_path(path, a) -> Path:
    """``data.csv`` -> ``data.truth.<a>.csv``."""
    p = Path(path)
    return p.with_name(f"{p.stem}.truth.{int(a)}{p.suffix}")


def save_truth(sim, path):
    """One truth file per treatment level next to ``path``; returns their paths."""
    paths = []
    for a in range(sim.n_treatments):
        target = truth_path(path, a)
        save_dataset(sim, target, outcomes=sim.counterfactual(a))
        paths.append(target)
    return paths


def _parse_header(header):
    cov, genes, t_col = [], [], None
    for col, name in enumerate(header):
        if name == "treatment":
            if t_col is not None:
                raise ParseError("duplicate 'treatment' column", 1)
            t_col = col
        elif name.startswith("cov:"):
            cov.append(col)
        elif name.startswith("g:"):
            genes.append(col)
        else:
            raise ParseError(f"unknown column {name!r} (expected 'cov:', 'treatment' or 'g:')", 1)
    if t_col is None:
        raise ParseError("missing required column 'treatment'", 1)
    return cov, t_col, genes


def _code(field, line, what):
    try:
        v = int(field)
    except ValueError:
        raise ParseError(f"{what} value {field!r} is not an integer code", line) from None
    if v < 0:
        raise ParseError(f"{what} code {v} is negative", line)
    return v


def load_dataset(path, n_treatments=None, covariate_levels=None) -> Dataset:
    """Read a dataset file. Level counts default to one past the largest code."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        cov, t_col, genes = _parse_header(header)
        width = len(header)
        X, T, Y = [], [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} fields, found {len(row)}", line)
            X.append([_code(row[c], line, "covariate") for c in cov])
            T.append(_code(row[t_col], line, "treatment"))
            try:
                y = [float(row[c]) for c in genes]
            except ValueError as exc:
                raise ParseError(f"bad gene value: {exc}", line) from None
            if not all(map(math.isfinite, y)):
                raise ParseError("non-finite gene value", line)
            Y.append(y)
    if not T:
        raise ParseError("file has a header but no units", 2)
    return Dataset(np.array(Y, dtype=np.float64).reshape(len(T), len(genes)),
                   np.array(X, dtype=np.int64).reshape(len(T), len(cov)),
                   np.array(T, dtype=np.int64), n_treatments, covariate_levels)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def save_splits(splits: SplitAssignment, path):
    _write_text(path, ["unit_index,label",
                       *(f"{i},{label}" for i, label in enumerate(splits.labels.tolist()))])


def load_splits(path) -> SplitAssignment:
    """Read a split file; held-out pairs are re-derived from the ood rows on use."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["unit_index", "label"]:
            raise ParseError("split file header must be 'unit_index,label'", 1)
        labels = []
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, found {len(row)}", reader.line_num)
            if row[0] != str(len(labels)):
                raise ParseError(f"unit_index {row[0]!r} out of sequence", reader.line_num)
            labels.append(row[1])
    try:
        return SplitAssignment(np.array(labels, dtype="<U5"))
    except ValueError as exc:
        raise ParseError(str(exc)) from None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _mlp_arch(mlp: MlpParams):
    return {"widths": list(mlp.widths), "activations": list(mlp.activations)}


def save_checkpoint(bundle: ModelBundle, path):
    """Binary layout::

        b"VCI1" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

    Integers are little-endian. The payload is a flat array of little-endian
    float64 values in this order: network blocks (as listed in the header),
    each stratum's mean then variance, each fallback's mean then variance,
    each propensity vector.
    """
    net, strat, prop = bundle.network, bundle.stratified, bundle.propensity
    blocks = net.blocks()
    strata = sorted(strat.strata)
    fallback = sorted(strat.fallback)
    prop_keys = sorted(prop.probs)
    header = {
        "dims": {"n_genes": net.n_genes, "latent_dim": net.latent_dim,
                 "covariate_levels": list(net.covariate_levels),
                 "n_treatments": net.n_treatments},
        "arch": {"encoder": _mlp_arch(net.encoder), "decoder": _mlp_arch(net.decoder)},
        "blocks": [[name, list(blocks[name].shape)] for name in blocks],
        "strata": [[list(c), t, int(strat.strata[(c, t)][2])] for c, t in strata],
        "fallback": [[t, int(strat.fallback[t][2])] for t in fallback],
        "variance_floor": strat.variance_floor,
        "propensity": {"keys": [list(k) for k in prop_keys], "clip": prop.clip},
        "seed": int(bundle.seed),
        "epoch": int(bundle.epoch),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [blocks[name].ravel() for name in blocks]
    for key in strata:
        parts += [strat.strata[key][0], strat.strata[key][1]]
    for t in fallback:
        parts += [strat.fallback[t][0], strat.fallback[t][1]]
    parts += [np.asarray(prop.probs[k]) for k in prop_keys]
    payload = np.concatenate(parts).astype("<f8") if parts else np.zeros(0, "<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload.tobytes())


def _payload_size(h):
    n = h["dims"]["n_genes"]
    blocks = sum(int(np.prod(shape)) for _, shape in h["blocks"])
    return blocks + 2 * n * (len(h["strata"]) + len(h["fallback"])) \
        + h["dims"]["n_treatments"] * len(h["propensity"]["keys"])


def _mlp_from(arch, take, prefix):
    widths = arch["widths"]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        weights.append(take(f"{prefix}W{i}"))
        biases.append(take(f"{prefix}b{i}"))
    return MlpParams(tuple(weights), tuple(biases), tuple(arch["activations"]))


def load_checkpoint(path) -> ModelBundle:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path}: not a VCI checkpoint (bad magic bytes)")
        fixed = fh.read(8)
        if len(fixed) != 8:
            raise FormatError(f"{path}: truncated checkpoint header")
        version, head_len = struct.unpack("<II", fixed)
        if version != CHECKPOINT_VERSION:
            raise FormatError(
                f"{path}: checkpoint format version {version} is not supported "
                f"(this build reads version {CHECKPOINT_VERSION}); re-save it with a matching release"
            )
        if head_len > min(MAX_HEADER_BYTES, size - 12):
            raise FormatError(f"{path}: declared header length {head_len} exceeds file size")
        try:
            h = json.loads(fh.read(head_len).decode("utf-8"))
            expected = _payload_size(h)
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from None
        if size - 12 - head_len != 8 * expected:
            raise FormatError(
                f"{path}: payload holds {size - 12 - head_len} bytes, header declares {8 * expected}"
            )
        payload = np.frombuffer(fh.read(8 * expected), dtype="<f8").astype(np.float64)

    pos = 0

    def take_n(count):
        nonlocal pos
        out = payload[pos:pos + count]
        pos += count
        return out

    shapes = {name: tuple(shape) for name, shape in h["blocks"]}
    arrays = {name: take_n(int(np.prod(shape))).reshape(shape) for name, shape in shapes.items()}
    try:
        dims = h["dims"]
        net = VciNetwork(
            _mlp_from(h["arch"]["encoder"], arrays.__getitem__, "encoder."),
            _mlp_from(h["arch"]["decoder"], arrays.__getitem__, "decoder."),
            dims["n_genes"], dims["latent_dim"], tuple(dims["covariate_levels"]),
            dims["n_treatments"],
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: checkpoint blocks do not match the architecture ({exc})") from None
    n = dims["n_genes"]
    strata = {}
    for c, t, count in h["strata"]:
        strata[(tuple(c), t)] = (take_n(n), take_n(n), count)
    fallback = {}
    for t, count in h["fallback"]:
        fallback[t] = (take_n(n), take_n(n), count)
    probs = {tuple(k): take_n(dims["n_treatments"]) for k in h["propensity"]["keys"]}
    strat = StratifiedOutcomeModel(strata, fallback, n, h["variance_floor"])
    prop = PropensityTable(probs, dims["n_treatments"], h["propensity"]["clip"])
    return ModelBundle(net, strat, prop, h["seed"], h["epoch"])


def epoch_checkpoint_path(path, epoch) -> Path:
    """``model.vci`` -> ``model.epoch<e>.vci``."""
    p = Path(path)
    return p.with_name(f"{p.stem}.epoch{int(epoch)}{p.suffix}")


# ---------------------------------------------------------------------------
# key = value files (manifests, sidecars)
# ---------------------------------------------------------------------------

def _kv_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return _real(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_kv_value(x) for x in v)
    text = str(v)
    if "\n" in text:
        raise ValueError("manifest values must be single-line")
    return text


def write_kv(path, items, comment=None):
    """Write ``key = value`` lines in the given order."""
    lines = [f"# {comment}"] if comment else []
    for key, value in items.items() if isinstance(items, dict) else items:
        if "=" in key or key != key.strip():
            raise ValueError(f"invalid key {key!r}")
        lines.append(f"{key} = {_kv_value(value)}")
    _write_text(path, lines)


def parse_kv_lines(lines, first_line=1):
    out = {}
    for offset, raw in enumerate(lines):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"expected 'key = value', got {line!r}", first_line + offset)
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_kv_lines(fh.read().splitlines())


def manifest_path(output) -> Path:
    p = Path(output)
    return p.with_name(p.name + ".manifest")


# ---------------------------------------------------------------------------
# train logs
# ---------------------------------------------------------------------------

TRAIN_LOG_COLUMNS = ("epoch", "total", "recon", "covariate", "kl")


def save_train_log(log: TrainLog, path):
    # Wall-clock seconds are kept in memory only; writing them would break
    # byte-identical reruns.
    _write_text(path, [",".join(TRAIN_LOG_COLUMNS)] + [
        ",".join([str(i), *(_real(e[k]) for k in TRAIN_LOG_COLUMNS[1:])])
        for i, e in enumerate(log.epochs, start=1)
    ])


def load_train_log(path) -> TrainLog:
    rows = _read_dsv(path, TRAIN_LOG_COLUMNS)
    return TrainLog(epochs=[{k: float(r[k]) for k in TRAIN_LOG_COLUMNS[1:]} for r in rows])


def _read_dsv(path, columns):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(columns):
            raise ParseError(f"expected header {','.join(columns)}", 1)
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(columns):
                raise ParseError(f"expected {len(columns)} fields, found {len(row)}", reader.line_num)
            rows.append(dict(zip(columns, row)))
    return rows


# ---------------------------------------------------------------------------
# predictions and estimates
# ---------------------------------------------------------------------------

def save_predictions(pred, path):
    pred = np.asarray(pred, dtype=np.float64)
    header = ["unit_index"] + [f"g:{i}" for i in range(pred.shape[1])]
    _write_text(path, [",".join(header)] + [
        ",".join([str(i), *map(repr, row)]) for i, row in enumerate(pred.tolist())
    ])


def load_predictions(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "unit_index":
            raise ParseError("prediction file must start with a 'unit_index' column", 1)
        rows = []
        for row in reader:
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", reader.line_num)
            rows.append([float(v) for v in row[1:]])
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)


def _cov_text(c):
    return "" if c is None else ";".join(str(int(v)) for v in c)


def _cov_parse(text):
    return None if text == "" else tuple(int(v) for v in text.split(";"))


def save_estimate(est: MarginalEstimate, path):
    """``gene_index,psi_hat`` rows plus a ``<path>.meta`` key = value sidecar."""
    _write_text(path, ["gene_index,psi_hat"] + [
        f"{i},{v!r}" for i, v in enumerate(est.psi_hat.tolist())
    ])
    write_kv(meta_path(path), {
        "method": est.method, "treatment": est.treatment, "n_units": est.n_units,
        "covariate": _cov_text(est.covariate),
        "samples": "" if est.samples is None else est.samples,
    })


def meta_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".meta")


def load_estimate(path) -> MarginalEstimate:
    rows = _read_dsv(path, ("gene_index", "psi_hat"))
    meta = read_kv(meta_path(path))
    try:
        return MarginalEstimate(
            np.array([float(r["psi_hat"]) for r in rows]), meta["method"],
            int(meta["treatment"]), int(meta["n_units"]), _cov_parse(meta["covariate"]),
            int(meta["samples"]) if meta["samples"] else None,
        )
    except KeyError as exc:
        raise ParseError(f"estimate sidecar is missing {exc}") from None


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("key", "value")
_INT_FIELDS = {"perturbation", "n_test", "n_ood", "epoch", "runs", "cells", "skipped"}


def _cell_text(key, v):
    if key == "covariate":
        return _cov_text(v)
    if isinstance(v, float):
        return _real(v)
    return str(v)


def _cell_parse(key, text):
    if key == "covariate":
        return _cov_parse(text)
    if key in _INT_FIELDS:
        return int(text)
    if key == "method":
        return text
    return float(text)


def write_report(report: EvalReport, path):
    """Config block of ``key = value`` lines, then DSV sections. Empty
    sections are omitted."""
    lines = ["# vci evaluation report"]
    lines += [f"{k} = {_kv_value(v)}" for k, v in report.config.items()]
    if report.cells:
        lines += ["[cells]", ",".join(CELL_COLUMNS)]
        lines += [",".join(_cell_text(k, c[k]) for k in CELL_COLUMNS) for c in report.cells]
    if report.summary:
        lines += ["[summary]", ",".join(SUMMARY_COLUMNS)]
        lines += [f"{k},{_cell_text(k, v)}" for k, v in report.summary.items()]
    if report.estimators:
        lines += ["[estimators]", ",".join(ESTIMATOR_COLUMNS)]
        lines += [",".join(_cell_text(k, r[k]) for k in ESTIMATOR_COLUMNS) for r in report.estimators]
    _write_text(path, lines)


def read_report(path) -> EvalReport:
    """Inverse of :func:`write_report`. Config values come back as strings."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    sections = {"": []}
    current = ""
    for no, line in enumerate(lines, start=1):
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in ("cells", "summary", "estimators"):
                raise ParseError(f"unknown section [{current}]", no)
            sections[current] = []
        else:
            sections[current].append((no, line))
    report = EvalReport(config=parse_kv_lines([l for _, l in sections[""]]))
    expected = {"cells": CELL_COLUMNS, "summary": SUMMARY_COLUMNS, "estimators": ESTIMATOR_COLUMNS}
    for name, cols in expected.items():
        body = [(no, l) for no, l in sections.get(name, []) if l.strip()]
        if not body:
            continue
        if body[0][1] != ",".join(cols):
            raise ParseError(f"[{name}] header must be {','.join(cols)}", body[0][0])
        for no, line in body[1:]:
            fields = line.split(",")
            if len(fields) != len(cols):
                raise ParseError(f"expected {len(cols)} fields, found {len(fields)}", no)
            try:
                if name == "summary":
                    report.summary[fields[0]] = _cell_parse(fields[0], fields[1])
                else:
                    row = {k: _cell_parse(k, v) for k, v in zip(cols, fields)}
                    getattr(report, name).append(row)
            except ValueError as exc:
                raise ParseError(str(exc), no) from None
    return report
