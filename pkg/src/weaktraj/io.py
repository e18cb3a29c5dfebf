"""Run configuration, file formats and manifests.

Configs are YAML in the units the experiment is usually quoted in (MHz,
us, ns). Tables are comma-separated text whose leading ``#`` lines carry a
self-describing header. Datasets can also be written to a compact ``.npz``
container with the same logical columns; it is written with fixed zip
timestamps so identical runs give identical bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io as _io
import json
import math
import warnings
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from . import __version__
from .model import (
    DEFAULT_STEP,
    BlochVector,
    EnsembleDataset,
    MeasurementConfig,
    MeasurementRecord,
    PhysicalParams,
    Quadrature,
    snap_to_grid,
)
from .simulator import DEFAULT_FIDELITY, DEFAULT_MAX_SAMPLES, ExperimentPlan


class GridSnapWarning(UserWarning):
    pass


@dataclass
class ParamsSection:
    chi_mhz: float = -0.49
    kappa_mhz: float = 10.8
    nbar: float = 0.4
    eta: float = 0.49
    t2_star_us: float = 20.0


@dataclass
class MeasurementSection:
    quadrature: str = "z"
    duration_us: float = 1.792
    step_ns: float = 16.0
    delta_v: float = 1.0
    initial_state: List[float] = field(default_factory=lambda: [1.0, 0.0, 0.0])


@dataclass
class PlanSection:
    repetitions: int = 1000
    measure_durations_us: Optional[List[float]] = None
    readout_fidelity: float = DEFAULT_FIDELITY
    herald: bool = True
    max_samples: int = DEFAULT_MAX_SAMPLES


@dataclass
class RunConfig:
    params: ParamsSection = field(default_factory=ParamsSection)
    measurement: MeasurementSection = field(default_factory=MeasurementSection)
    plan: PlanSection = field(default_factory=PlanSection)
    seed: int = 0
    out: str = "out"
    format: str = "npz"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        sections = {"params": ParamsSection, "measurement": MeasurementSection, "plan": PlanSection}
        kwargs = {}
        for name, value in data.items():
            if name in sections:
                section = sections[name]
                value = dict(value or {})
                bad = set(value) - {f.name for f in dataclasses.fields(section)}
                if bad:
                    raise ValueError(f"unknown keys in {name}: {sorted(bad)}")
                kwargs[name] = section(**value)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        doc = yaml.safe_load(text) or {}
        if isinstance(doc, dict) and "config" in doc and "config_hash" in doc:
            doc = doc["config"]  # a manifest
        return cls.from_dict(doc)

    def hash(self) -> str:
        # the output directory does not influence any result
        content = {k: v for k, v in self.to_dict().items() if k != "out"}
        canonical = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    # -- conversion to SI domain objects --

    def physical_params(self) -> PhysicalParams:
        p = self.params
        return PhysicalParams.from_mhz(p.chi_mhz, p.kappa_mhz, p.nbar, p.eta, p.t2_star_us)

    @property
    def step(self) -> float:
        return self.measurement.step_ns * 1e-9

    def _snap(self, duration: float) -> float:
        snapped = snap_to_grid(duration, self.step)
        if not math.isclose(snapped, duration, rel_tol=1e-9, abs_tol=1e-15):
            warnings.warn(
                f"duration {duration * 1e6:.6g} us is off the {self.measurement.step_ns:g} ns grid; "
                f"using {snapped * 1e6:.6g} us",
                GridSnapWarning,
                stacklevel=3,
            )
        return snapped

    def measurement_config(self) -> MeasurementConfig:
        m = self.measurement
        return MeasurementConfig(
            quadrature=Quadrature.parse(m.quadrature),
            duration=self._snap(m.duration_us * 1e-6),
            step=self.step,
            delta_v=m.delta_v,
            initial_state=BlochVector.from_array(m.initial_state),
        )

    def experiment_plan(self) -> ExperimentPlan:
        p = self.plan
        durations = None
        if p.measure_durations_us:
            durations = tuple(self._snap(d * 1e-6) for d in p.measure_durations_us)
        return ExperimentPlan(
            repetitions=p.repetitions,
            measure_durations=durations,
            readout_fidelity=p.readout_fidelity,
            herald=p.herald,
            max_samples=p.max_samples,
        )


def load_config(path) -> RunConfig:
    return RunConfig.loads(Path(path).read_text())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- headers and tables -------------------------------------------------------


def _format_column(values: np.ndarray) -> List[str]:
    values = np.asarray(values)
    if values.dtype.kind in "iub":
        return [str(int(v)) for v in values]
    return [repr(float(v)) for v in values]


def write_table(path, columns: Dict[str, np.ndarray], header: Dict[str, object]) -> None:
    """Comma-separated table preceded by ``# key: value`` header lines."""
    names = list(columns)
    lengths = {len(np.asarray(v)) for v in columns.values()}
    if len(lengths) > 1:
        raise ValueError("all columns must have the same length")
    formatted = [_format_column(columns[n]) for n in names]
    lines = [f"# {k}: {json.dumps(v, sort_keys=True)}" for k, v in header.items()]
    lines.append(f"# columns: {json.dumps(names)}")
    lines.append(",".join(names))
    lines.extend(",".join(row) for row in zip(*formatted))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    header = {}
    body = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = json.loads(value)
        elif line.strip():
            body.append(line)
    if not body:
        raise ValueError(f"{path}: no column row")
    names = body[0].split(",")
    rows = [r.split(",") for r in body[1:]]
    columns = {}
    for j, name in enumerate(names):
        raw = [r[j] for r in rows]
        try:
            columns[name] = np.array([int(v) for v in raw], dtype=np.int64)
        except ValueError:
            columns[name] = np.array([float(v) for v in raw])
    return header, columns


def run_header(config: Optional[RunConfig], kind: str, units: str, **extra) -> dict:
    header = {"weaktraj": __version__, "kind": kind}
    if config is not None:
        header["config_hash"] = config.hash()
        header["seed"] = config.seed
    header["units"] = units
    header.update(extra)
    return header


# -- dataset serialisation ----------------------------------------------------

_DATASET_UNITS = "times s (tau_k = k * step); voltages in units where the |0>,|1> separation is delta_v"


def dataset_meta(ds: EnsembleDataset) -> dict:
    cfg, p = ds.config, ds.params
    return {
        "params": {"chi": p.chi, "kappa": p.kappa, "nbar": p.nbar, "eta": p.eta, "t2_star": p.t2_star},
        "config": {
            "quadrature": cfg.quadrature.value,
            "duration": cfg.duration,
            "step": cfg.step,
            "delta_v": cfg.delta_v,
            "initial_state": list(cfg.initial_state),
        },
        "master_seed": ds.master_seed,
        "readout_fidelity": ds.readout_fidelity,
    }


def _meta_objects(meta: dict):
    params = PhysicalParams(**meta["params"])
    c = meta["config"]
    config = MeasurementConfig(
        Quadrature.parse(c["quadrature"]),
        c["duration"],
        c["step"],
        c["delta_v"],
        BlochVector.from_array(c["initial_state"]),
    )
    return params, config


_FIXED_COLUMNS = ("repetition", "n_steps", "axis", "result", "eigenstate")


def _dataset_columns(ds: EnsembleDataset) -> Dict[str, np.ndarray]:
    cols = {name: getattr(ds, name) for name in _FIXED_COLUMNS}
    for a, name in enumerate("xyz"):
        cols[f"true_{name}"] = ds.true_final[:, a]
    for k in range(ds.max_steps):
        cols[f"v_{k + 1}"] = ds.instantaneous[:, k]
    return cols


def _write_npz(path, arrays: Dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = _io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def write_dataset(path, ds: EnsembleDataset, header: dict, traces: bool = False) -> None:
    path = Path(path)
    header = dict(header, meta=dataset_meta(ds))
    if path.suffix == ".npz":
        arrays = {name: getattr(ds, name) for name in _FIXED_COLUMNS}
        arrays.update(true_final=ds.true_final, instantaneous=ds.instantaneous)
        if traces and ds.true_traces is not None:
            arrays["true_traces"] = ds.true_traces
        arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        _write_npz(path, arrays)
    else:
        write_table(path, _dataset_columns(ds), header)


def read_dataset(path) -> Tuple[dict, EnsembleDataset]:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(bytes(data["header"]).decode())
            arrays = {k: data[k] for k in data.files if k != "header"}
        instantaneous = arrays["instantaneous"]
        true_final = arrays["true_final"]
        traces = arrays.get("true_traces")
    else:
        header, cols = read_table(path)
        n_steps = sum(1 for c in cols if c.startswith("v_"))
        arrays = {name: cols[name] for name in _FIXED_COLUMNS}
        instantaneous = (
            np.column_stack([cols[f"v_{k + 1}"].astype(float) for k in range(n_steps)])
            if n_steps else np.empty((len(cols["repetition"]), 0))
        )
        true_final = np.column_stack([cols[f"true_{a}"].astype(float) for a in "xyz"]) if len(
            cols["repetition"]) else np.empty((0, 3))
        traces = None
    meta = header["meta"]
    params, config = _meta_objects(meta)
    ds = EnsembleDataset(
        config=config,
        params=params,
        master_seed=meta["master_seed"],
        readout_fidelity=meta["readout_fidelity"],
        repetition=arrays["repetition"],
        n_steps=arrays["n_steps"],
        instantaneous=instantaneous,
        axis=arrays["axis"],
        result=arrays["result"],
        eigenstate=arrays["eigenstate"],
        true_final=true_final,
        true_traces=traces,
    )
    return header, ds


def write_record(path, record: MeasurementRecord, header: dict) -> None:
    step = float(record.times[0]) if len(record) else DEFAULT_STEP
    header = dict(header, quadrature=record.quadrature.value, step=step,
                  record_seed=list(record.seed) if isinstance(record.seed, tuple) else record.seed)
    write_table(path, {"tau": record.times, "v": record.instantaneous, "v_m": record.integrated}, header)


def read_record(path) -> Tuple[dict, MeasurementRecord]:
    header, cols = read_table(path)
    seed = header.get("record_seed")
    seed = tuple(seed) if isinstance(seed, list) else seed
    record = MeasurementRecord(seed, header["quadrature"], cols["tau"], cols["v"], cols["v_m"])
    return header, record


def write_manifest(path, config: RunConfig, files: Dict[str, Path]) -> dict:
    manifest = {
        "weaktraj": __version__,
        "config_hash": config.hash(),
        "seed": config.seed,
        "config": config.to_dict(),
        "files": {name: sha256_file(p) for name, p in sorted(files.items())},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
