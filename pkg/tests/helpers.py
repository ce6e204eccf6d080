"""Shared in-process fakes and oracle helpers for the test suite."""

from __future__ import annotations

import gzip
import io
import tarfile
import threading
import time
from typing import BinaryIO, Optional

from figarchive.errors import TransientTransportError
from figarchive.ingest import TransferInfo


class MockTransport:
    """In-memory transport recording request timestamps.

    ``fail_first`` maps a remote path to the number of transient failures to
    serve before succeeding.  ``lie_size`` forces a wrong expected_size.
    """

    def __init__(self, files: dict[str, bytes], fail_first: Optional[dict[str, int]] = None,
                 lie_size: Optional[dict[str, int]] = None):
        self.files = dict(files)
        self.fail_first = dict(fail_first or {})
        self.lie_size = dict(lie_size or {})
        self.requests: list[tuple[float, str]] = []
        self._lock = threading.Lock()

    def retrieve(self, remote_path: str, dest: BinaryIO) -> TransferInfo:
        with self._lock:
            self.requests.append((time.monotonic(), remote_path))
            remaining = self.fail_first.get(remote_path, 0)
            if remaining > 0:
                self.fail_first[remote_path] = remaining - 1
                raise TransientTransportError(f"simulated disconnect for {remote_path}")
        if remote_path not in self.files:
            raise TransientTransportError(f"no such file {remote_path}")
        data = self.files[remote_path]
        dest.write(data)
        expected = self.lie_size.get(remote_path, len(data))
        return TransferInfo(bytes_written=len(data), expected_size=expected)

    def list(self, remote_dir: str) -> list[str]:
        return sorted(p for p in self.files if p.startswith(remote_dir))


def make_targz(members: dict[str, bytes]) -> bytes:
    """Build a gzip-compressed tar with the given member name -> bytes map."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w:gz") as tar:
        for name, data in members.items():
            info = tarfile.TarInfo(name=name)
            info.size = len(data)
            tar.addfile(info, io.BytesIO(data))
    return buf.getvalue()


def max_events_in_window(timestamps: list[float], window: float = 1.0) -> int:
    """Oracle: densest closed window of the given width over the timestamps.

    Anchoring windows at each event is sufficient: any densest window can be
    shifted left until it starts at an event without losing events.
    """
    ts = sorted(timestamps)
    worst = 0
    for i, start in enumerate(ts):
        worst = max(worst, sum(1 for t in ts[i:] if t - start <= window))
    return worst


def tar_member_names(archive_bytes: bytes) -> list[str]:
    """Independent listing of a .tar.gz used as the extraction oracle."""
    with tarfile.open(fileobj=io.BytesIO(gzip.decompress(archive_bytes)), mode="r:") as tar:
        return [m.name for m in tar.getmembers() if m.isfile()]
