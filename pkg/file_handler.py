"""File system operations for lab artifacts."""

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from errors import SnapshotError
from utils import ensure_directory_exists

MAGIC = b'MLAB'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<IQ')


def dumps_json(document):
    """Serialize with sorted keys and fixed separators so reruns are byte-identical."""
    return json.dumps(document, sort_keys=True, indent=1, separators=(',', ': ')) + '\n'


def pack_container(manifest, arrays):
    """Build the binary container: magic, version, manifest length, manifest, float64 payload."""
    entries = []
    chunks = []
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array, dtype='<f8')
        entries.append({'name': name, 'shape': list(array.shape), 'offset': offset, 'count': int(array.size)})
        chunks.append(array.tobytes())
        offset += int(array.size)
    manifest = dict(manifest)
    manifest['format_version'] = FORMAT_VERSION
    manifest['arrays'] = entries
    header = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + _HEADER.pack(FORMAT_VERSION, len(header)) + header + b''.join(chunks)


def unpack_container(payload):
    """Inverse of ``pack_container``; raises ``SnapshotError`` on any inconsistency."""
    prefix = len(MAGIC) + _HEADER.size
    if len(payload) < prefix or payload[:len(MAGIC)] != MAGIC:
        raise SnapshotError("corrupt payload: missing container header")
    version, header_length = _HEADER.unpack(payload[len(MAGIC):prefix])
    if version != FORMAT_VERSION:
        raise SnapshotError(f"version mismatch: container v{version}, reader v{FORMAT_VERSION}")
    if len(payload) < prefix + header_length:
        raise SnapshotError("corrupt payload: truncated manifest")
    try:
        manifest = json.loads(payload[prefix:prefix + header_length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SnapshotError(f"corrupt payload: unreadable manifest ({e})") from e

    body = payload[prefix + header_length:]
    total = sum(entry['count'] for entry in manifest.get('arrays', []))
    if len(body) != total * 8:
        raise SnapshotError(f"corrupt payload: expected {total * 8} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype='<f8')
    arrays = {}
    for entry in manifest['arrays']:
        start = entry['offset']
        chunk = values[start:start + entry['count']]
        arrays[entry['name']] = chunk.reshape(entry['shape']).astype(np.float64)
    return manifest, arrays


class ArtifactStore:
    """Reads and writes everything a run puts under its output directory."""

    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)

    def path(self, *parts):
        return self.output_dir.joinpath(*parts)

    def create_output_structure(self):
        """Create the fixed sub-directories of a run."""
        for sub in ('scenes', 'snapshots', 'traces', 'plots', 'curves'):
            ensure_directory_exists(self.output_dir / sub)

    def write_text(self, content, relative_path):
        output_path = self.path(relative_path)
        ensure_directory_exists(output_path.parent)
        with open(output_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(content)
        return output_path

    def read_text(self, relative_path):
        with open(self.path(relative_path), 'r', encoding='utf-8') as f:
            return f.read()

    def write_json(self, document, relative_path):
        return self.write_text(dumps_json(document), relative_path)

    def read_json(self, relative_path):
        return json.loads(self.read_text(relative_path))

    def write_bytes(self, payload, relative_path):
        output_path = self.path(relative_path)
        ensure_directory_exists(output_path.parent)
        with open(output_path, 'wb') as f:
            f.write(payload)
        return output_path

    def read_bytes(self, relative_path):
        with open(self.path(relative_path), 'rb') as f:
            return f.read()

    def exists(self, relative_path):
        return self.path(relative_path).exists()

    def write_csv(self, rows, columns, relative_path):
        """Write dict rows with a fixed column order; floats keep full precision."""
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator='\n', extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _format_cell(row.get(key, '')) for key in columns})
        return self.write_text(buffer.getvalue(), relative_path)

    def read_csv(self, relative_path):
        with open(self.path(relative_path), 'r', encoding='utf-8', newline='') as f:
            return list(csv.DictReader(f))

    def write_jsonl(self, records, relative_path):
        lines = [json.dumps(record, sort_keys=True, separators=(',', ':')) for record in records]
        return self.write_text('\n'.join(lines) + ('\n' if lines else ''), relative_path)

    def read_jsonl(self, relative_path):
        return [json.loads(line) for line in self.read_text(relative_path).splitlines() if line.strip()]

    def find_files(self, sub_dir, suffix):
        """Sorted files under a sub-directory with the given suffix."""
        root = self.path(sub_dir)
        if not root.exists():
            return []
        return sorted(p for p in root.rglob(f'*{suffix}') if p.is_file())


def _format_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value
