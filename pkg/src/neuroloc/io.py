"""JSON-header + raw binary bundles for lead fields, observations and estimates.

A bundle ``<stem>`` is two files: ``<stem>.json`` with metadata and an
``arrays`` table, and ``<stem>.bin`` holding every array as little-endian
float64 (or int64 / bool) in C (row-major) order at the listed byte offset.
"""

import json
import os
from pathlib import Path

import numpy as np

from .headmodel import LeadField, SensorArray, SourceSpace
from .linear import CurrentEstimate
from .simulate import Observation

FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1"}


def _paths(stem):
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def _atomic_write(path, data, mode="wb"):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_bundle(stem, kind, header, arrays):
    json_path, bin_path = _paths(stem)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.bool_:
            code = "b1"
        elif np.issubdtype(arr.dtype, np.integer):
            code = "i8"
        else:
            code = "f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
        table.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta = {"format": "neuroloc-bundle", "version": FORMAT_VERSION, "kind": kind,
            "binary": bin_path.name, "header": header, "arrays": table}
    _atomic_write(bin_path, b"".join(chunks))
    _atomic_write(json_path, json.dumps(meta, indent=2, sort_keys=True) + "\n", mode="w")
    return json_path


def read_bundle(stem, kind=None):
    json_path, bin_path = _paths(stem)
    meta = json.loads(json_path.read_text())
    if meta.get("format") != "neuroloc-bundle":
        raise ValueError(f"{json_path} is not a neuroloc bundle")
    if meta["version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported bundle version {meta['version']}")
    if kind is not None and meta["kind"] != kind:
        raise ValueError(f"expected a {kind} bundle, found {meta['kind']}")
    blob = bin_path.read_bytes()
    arrays = {}
    for entry in meta["arrays"]:
        chunk = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return meta["header"], arrays


# --------------------------------------------------------------------------


def save_lead_field(lead, stem):
    space, sensors = lead.source_space, lead.sensor_array
    m, n3 = lead.matrix.shape
    header = {
        "rows": m,
        "cols": n3,
        "n_points": n3 // 3,
        "ordering": "row-major; row i = sensor i; column 3k+c = moment axis c (x,y,z) of "
                    "point k; points in raster order, x fastest then y then z",
        "units": {"matrix": "fT/nAm", "positions": "mm"},
        "grid_spacing_mm": space.grid_spacing,
        "sphere_radius_mm": sensors.sphere_radius,
    }
    return write_bundle(stem, "lead_field", header, {
        "matrix": lead.matrix,
        "points": space.points,
        "origin": space.origin,
        "mask": space.mask,
        "sensor_positions": sensors.positions,
        "sensor_orientations": sensors.orientations,
        "sphere_center": sensors.sphere_center,
    })


def load_lead_field(stem):
    header, a = read_bundle(stem, "lead_field")
    space = SourceSpace(grid_spacing=header["grid_spacing_mm"], origin=a["origin"],
                        mask=a["mask"], points=a["points"],
                        sphere_radius=header["sphere_radius_mm"])
    sensors = SensorArray(positions=a["sensor_positions"], orientations=a["sensor_orientations"],
                          sphere_center=a["sphere_center"],
                          sphere_radius=header["sphere_radius_mm"])
    return LeadField(matrix=a["matrix"], source_space=space, sensor_array=sensors)


def save_observation(obs, stem, extra=None):
    header = {"psnr_db": obs.psnr_db if np.isfinite(obs.psnr_db) else "inf",
              "rng_seed": obs.rng_seed, "n_sensors": obs.n_sensors, "units": "fT"}
    if extra:
        header.update(extra)
    return write_bundle(stem, "observation", header, {
        "b_obs": obs.b_obs, "clean": obs.clean, "noise_cov": obs.noise_cov})


def load_observation(stem):
    header, a = read_bundle(stem, "observation")
    return Observation(b_obs=a["b_obs"], noise_cov=a["noise_cov"], clean=a["clean"],
                       psnr_db=float(header["psnr_db"]), rng_seed=int(header["rng_seed"]))


def save_estimate(est, stem, extra=None):
    header = {"method": est.method, "lambda": est.lam, "p": est.p,
              "diagnostics": est.diagnostics, "units": "nAm"}
    if extra:
        header.update(extra)
    return write_bundle(stem, "estimate", header, {
        "q_hat": est.q_hat, "per_point_amplitude": est.per_point_amplitude})


def load_estimate(stem):
    header, a = read_bundle(stem, "estimate")
    return CurrentEstimate(q_hat=a["q_hat"], per_point_amplitude=a["per_point_amplitude"],
                           method=header["method"], lam=header["lambda"], p=header["p"],
                           diagnostics=header["diagnostics"])
