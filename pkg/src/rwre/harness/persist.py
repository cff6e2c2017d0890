"""Atomic output files with self-describing headers.

Every file starts with ``#`` header lines: schema version, kind, creation
time, config digest, content hash of the body, generator provenance and the
full serialized config.  Only the ``created`` line varies between reruns, so
bodies (all non-``#`` lines) are byte-identical for a fixed config.
"""

from dataclasses import dataclass, field
import csv
import datetime as _dt
import hashlib
import io
import os
import tempfile

import numpy as np

from ..seeding import generator_provenance
from .config import SCHEMA_VERSION

OUTPUT_DIR_ENV = "RWRE_OUTPUT_DIR"


def content_hash(body):
    """Git blob hash of ``body``."""
    data = body.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class ResultRecord:
    """One output file: ``kind`` tag, text payload and provenance fields."""

    kind: str
    body: str
    provenance: dict = field(default_factory=dict)

    def header(self, config):
        lines = [
            f"schema_version = {SCHEMA_VERSION}",
            f"kind = {self.kind}",
            f"created = {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}",
            f"config_digest = {config.digest()}",
            f"content_hash = {content_hash(self.body)}",
            f"generator = {generator_provenance()}",
        ]
        lines += [f"{k} = {v}" for k, v in self.provenance.items()]
        lines += ["config:"] + [f"  {line}" for line in config.serialize().splitlines()]
        return "".join(f"# {line}\n" for line in lines)

    def render(self, config):
        return self.header(config) + self.body


def csv_body(columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_body(path):
    """Non-header lines of an output file."""
    with open(path) as fh:
        return "".join(line for line in fh if not line.startswith("#"))


def output_directory(config):
    return os.environ.get(OUTPUT_DIR_ENV) or config["output.directory"]


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temp file in the same directory and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_records(config, records, directory=None):
    """Write ``{filename: ResultRecord}`` atomically; returns the written paths."""
    directory = directory or output_directory(config)
    return [atomic_write(os.path.join(directory, name), rec.render(config)) for name, rec in records.items()]
