"""MINC volume reader.

MINC2 files are HDF5 containers (read with h5py); MINC1 files are NetCDF
(read with scipy).  Volumes come back as float64 arrays ordered
(zspace, yspace, xspace), i.e. sliceable as (axial, coronal, sagittal).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

_HDF5_MAGIC = b"\x89HDF\r\n\x1a\n"
_NETCDF_MAGICS = (b"CDF\x01", b"CDF\x02")
_CANONICAL = ("zspace", "yspace", "xspace")


class MincError(ValueError):
    pass


def _reorder(volume: np.ndarray, dim_names) -> np.ndarray:
    names = [str(n) for n in dim_names]
    if volume.ndim != 3:
        raise MincError(f"expected a 3-D volume, got shape {volume.shape}")
    if sorted(names) != sorted(_CANONICAL):
        # Nonstandard dimension names: keep stored order.
        return volume
    return volume.transpose([names.index(d) for d in _CANONICAL])


def _read_minc2(path: Path) -> np.ndarray:
    import h5py

    with h5py.File(path, "r") as fh:
        try:
            ds = fh["minc-2.0/image/0/image"]
        except KeyError as exc:
            raise MincError(f"no image dataset in {path}") from exc
        volume = np.asarray(ds[...], dtype=np.float64)
        dimorder = ds.attrs.get("dimorder")
        if dimorder is None:
            return volume
        if isinstance(dimorder, bytes):
            dimorder = dimorder.decode("ascii")
        return _reorder(volume, str(dimorder).split(","))


def _read_minc1(path: Path) -> np.ndarray:
    from scipy.io import netcdf_file

    with netcdf_file(str(path), "r", mmap=False) as nc:
        if "image" not in nc.variables:
            raise MincError(f"no image variable in {path}")
        var = nc.variables["image"]
        volume = np.asarray(var[...], dtype=np.float64)
        return _reorder(volume, var.dimensions)


def read_minc(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == _HDF5_MAGIC:
        return _read_minc2(path)
    if magic[:4] in _NETCDF_MAGICS:
        return _read_minc1(path)
    raise MincError(f"not a MINC1/MINC2 file: {path}")
