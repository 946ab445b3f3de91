"""Output helpers: CSV tables and metadata sidecars.

Every emitted file gets a companion ``<file>.meta`` in the same sectioned
key-value format as the experiment configs, carrying the fully resolved
configuration, the code version, and the wall-clock runtime, which is
enough to re-run the experiment bit-identically.
"""

from __future__ import annotations

import configparser
import csv
import datetime
import numbers

from .. import __version__


def _fmt(value):
    if isinstance(value, numbers.Integral):
        return str(int(value))
    if isinstance(value, numbers.Real):
        return f"{float(value):.12g}"
    return str(value)


def write_csv(path, header, rows):
    """Comma-separated table with a header row and %.12g numeric cells."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_metadata(output_path, resolved_config, runtime_s, workers,
                   extra=None):
    parser = configparser.ConfigParser(interpolation=None)
    parser.add_section("metadata")
    parser.set("metadata", "code_version", __version__)
    parser.set("metadata", "runtime_seconds", f"{runtime_s:.3f}")
    parser.set("metadata", "workers", str(workers))
    parser.set("metadata", "created_utc",
               datetime.datetime.now(datetime.timezone.utc).isoformat())
    if extra:
        for key, value in extra.items():
            parser.set("metadata", key, str(value))
    for section, values in resolved_config.items():
        parser.add_section(section)
        for key, value in values.items():
            parser.set(section, key, str(value))
    with open(f"{output_path}.meta", "w") as f:
        parser.write(f)


def read_metadata(output_path):
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(f"{output_path}.meta"):
        raise FileNotFoundError(f"{output_path}.meta")
    return {s: dict(parser[s]) for s in parser.sections()}
