"""Binary field containers, run configuration, trace persistence.

Container layout (all integers and floats little-endian):

    magic   5 bytes   b"CRVB1"
    kind    u8        0 = chart, 1 = matrix field, 2 = connection form
    marker  u32       0x01020304 (endianness check)
    n       u32       ambient complex dimension
    r       u32       matrix rank (0 for charts)
    res     u32       lattice resolution per axis
    rho     f64       current mask radius
    box_rho f64       lattice-defining radius
    backend u8        0 = grid only, 1 = polynomial attached
    ncomp   u32       number of components (0 chart, 1 field, n-1 form)

then per component: the validity mask as res^(2n-1) bytes (C order, x^n
fastest), the values as res^(2n-1) * r * r complex numbers written as
(re, im) f64 pairs in C order, and, when the backend byte is 1, a
u64-length-prefixed JSON blob with the exact polynomial.

Writes are atomic (temp file, then rename), and a round trip is
byte-identical, so verification can run on a different machine.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .calculus import ConnectionForm, MatrixField
from .errors import FormatError
from .geometry import GridChart, build_grid, restrict
from .polynomial import MatrixPolynomial

__all__ = ["save_chart", "save_field", "save_form", "load", "save_json",
           "default_run_config", "load_run_config"]

MAGIC = b"CRVB1"
MARKER = 0x01020304

KIND_CHART = 0
KIND_FIELD = 1
KIND_FORM = 2


def _write_header(fh, kind: int, n: int, r: int, resolution: int,
                  rho: float, box_rho: float, backend: int, ncomp: int):
    fh.write(MAGIC)
    fh.write(struct.pack("<BIIIIddBI", kind, MARKER, n, r, resolution,
                         rho, box_rho, backend, ncomp))


def _read_header(fh):
    magic = fh.read(5)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw = fh.read(struct.calcsize("<BIIIIddBI"))
    if len(raw) != struct.calcsize("<BIIIIddBI"):
        raise FormatError("truncated header")
    kind, marker, n, r, resolution, rho, box_rho, backend, ncomp = \
        struct.unpack("<BIIIIddBI", raw)
    if marker != MARKER:
        raise FormatError(f"endianness marker mismatch: {marker:#x}")
    return kind, n, r, resolution, rho, box_rho, backend, ncomp


def _atomic_write(path: str, writer) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_component(fh, field: MatrixField) -> None:
    fh.write(np.ascontiguousarray(field.valid, dtype=np.uint8).tobytes())
    vals = np.ascontiguousarray(field.values, dtype=np.complex128)
    pairs = np.empty(vals.shape + (2,), dtype="<f8")
    pairs[..., 0] = vals.real
    pairs[..., 1] = vals.imag
    fh.write(pairs.tobytes())
    if field.poly is not None:
        blob = field.poly.to_json().encode("utf-8")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def _read_component(fh, chart: GridChart, r: int, backend: int) -> MatrixField:
    npts = int(np.prod(chart.shape))
    raw = fh.read(npts)
    if len(raw) != npts:
        raise FormatError("truncated validity mask")
    valid = np.frombuffer(raw, dtype=np.uint8).astype(bool).reshape(chart.shape)
    nbytes = npts * r * r * 16
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise FormatError("truncated value block")
    pairs = np.frombuffer(raw, dtype="<f8").reshape(chart.shape + (r, r, 2))
    values = pairs[..., 0] + 1j * pairs[..., 1]
    poly = None
    if backend == 1:
        lraw = fh.read(8)
        if len(lraw) != 8:
            raise FormatError("truncated polynomial blob length")
        (blen,) = struct.unpack("<Q", lraw)
        blob = fh.read(blen)
        if len(blob) != blen:
            raise FormatError("truncated polynomial blob")
        poly = MatrixPolynomial.from_json(blob.decode("utf-8"))
    return MatrixField(chart=chart, values=np.ascontiguousarray(values),
                       valid=valid, poly=poly)


def _rebuild_chart(n: int, resolution: int, rho: float,
                   box_rho: float) -> GridChart:
    chart = build_grid(n, box_rho, resolution)
    if rho != box_rho:
        chart = restrict(chart, rho)
    return chart


def save_chart(path: str, chart: GridChart) -> None:
    def writer(fh):
        _write_header(fh, KIND_CHART, chart.n, 0, chart.resolution,
                      chart.rho, chart.box_rho, 0, 0)
    _atomic_write(path, writer)


def save_field(path: str, field: MatrixField) -> None:
    chart = field.chart
    backend = 1 if field.poly is not None else 0

    def writer(fh):
        _write_header(fh, KIND_FIELD, chart.n, field.r, chart.resolution,
                      chart.rho, chart.box_rho, backend, 1)
        _write_component(fh, field)
    _atomic_write(path, writer)


def save_form(path: str, form: ConnectionForm) -> None:
    chart = form.chart
    backend = 1 if form.has_poly else 0

    def writer(fh):
        _write_header(fh, KIND_FORM, chart.n, form.r, chart.resolution,
                      chart.rho, chart.box_rho, backend, chart.n - 1)
        for comp in form.components:
            _write_component(fh, comp)
    _atomic_write(path, writer)


def load(path: str):
    """Load a chart, field or form; the chart is rebuilt deterministically."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc}") from exc
    with fh:
        kind, n, r, resolution, rho, box_rho, backend, ncomp = _read_header(fh)
        chart = _rebuild_chart(n, resolution, rho, box_rho)
        if kind == KIND_CHART:
            return chart
        if kind == KIND_FIELD:
            return _read_component(fh, chart, r, backend)
        if kind == KIND_FORM:
            comps = tuple(_read_component(fh, chart, r, backend)
                          for _ in range(ncomp))
            return ConnectionForm(chart=chart, components=comps)
    raise FormatError(f"unknown container kind {kind}")


def save_json(path: str, payload: dict) -> None:
    _atomic_write(path, lambda fh: fh.write(
        json.dumps(payload, indent=2, sort_keys=True).encode("utf-8")))


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def default_run_config() -> dict:
    """Every tunable of a run, spelled out."""
    return {
        "problem": {
            "n": 3, "r": 2, "rho0": 1.0, "resolution": 9,
            "amplitude": 1e-2, "seed": 7, "generator": "exp-polynomial",
            "degree": 2, "nfactors": 2, "custom_file": None,
        },
        "engine": {
            "k": 1, "alpha": 0.5, "normalization": "taylor", "norm_order": 1,
            "prescale_kappa": 0.25, "jmax": 8, "tol": None, "tol_rel": 1e-7,
            "c_tilde": 1.0, "max_restarts": 3, "integrability_tol": 1e-8,
            "holder_pair_budget": 20000, "seed": 0,
        },
        "solver": {
            "regularization": None, "residual_tol": 1e-12,
            "max_iterations": 5000, "backend": "polynomial",
            "ansatz_degree": None,
        },
        "output": {"dir": "runs/latest"},
    }


def load_run_config(path: str | None) -> dict:
    """Defaults overlaid with the user file; CRVB_SEED wins over both."""
    cfg = default_run_config()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
        for section, values in user.items():
            if section not in cfg:
                raise ValueError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ValueError(f"config section {section!r} must be a table")
            for key, val in values.items():
                if key not in cfg[section]:
                    raise ValueError(f"unknown config key {section}.{key}")
                cfg[section][key] = val
    env_seed = os.environ.get("CRVB_SEED")
    if env_seed is not None:
        cfg["problem"]["seed"] = int(env_seed)
    return cfg
