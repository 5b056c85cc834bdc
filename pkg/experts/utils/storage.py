import json
import os
import tempfile
from pathlib import Path

from experts.exceptions import MissingArtifact


def format_float(value):
    """Nine significant digits, the precision of every emitted number."""
    return format(float(value), '.9g')


def round_float(value):
    """``value`` cut to the digits ``format_float`` writes, so artifacts read back equal."""
    return float(format_float(value))


def atomic_write(path, data):
    """Write ``data`` (str or bytes) next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode('utf-8')
    fd, temp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(temp, path)
    except BaseException:
        if os.path.exists(temp):
            os.unlink(temp)
        raise
    return path


def write_json(path, payload):
    return atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + '\n')


def read_json(path, produced_by=None):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path, produced_by)
    with open(path, encoding='utf-8') as handle:
        return json.load(handle)


def require(path, produced_by=None):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path, produced_by)
    return path
