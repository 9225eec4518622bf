"""Small file helpers: atomic writes and deterministic CSV formatting."""
import io
import os
import tempfile

import numpy as np


def atomic_write_bytes(path, data):
    """Write to a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def fmt_float(v):
    """Shortest decimal that roundtrips to the same double."""
    return repr(float(v))


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt_float(v) if isinstance(v, float) else str(v)
                              for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_dense(path, arr, fmt="%.5f"):
    """Dense correspondences as row_a,col_a,row_b,col_b CSV."""
    buf = io.StringIO()
    buf.write("row_a,col_a,row_b,col_b\n")
    np.savetxt(buf, np.asarray(arr, dtype=float).reshape(-1, 4), fmt=fmt, delimiter=",")
    atomic_write_text(path, buf.getvalue())


def read_dense(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.reshape(-1, 4)
