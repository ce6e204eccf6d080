"""Mirror ingestion: file-list parsing, rate-limited package download, and
archive extraction keeping only the needed media.

The mirror's index is a CSV ("file list") mapping each article to the remote
path of its gzip-compressed tar of media files.  Remote access goes through a
small :class:`Transport` interface so production can speak FTP while tests
use an in-process fake.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tarfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path, PurePosixPath
from typing import BinaryIO, Optional, Protocol, Sequence

from .errors import (
    ExtractionError,
    FetchError,
    IntegrityError,
    ParseError,
    SchemaError,
    SecurityError,
    TransientTransportError,
    ValidationError,
)
from .ratelimit import SlidingWindowLimiter, retry_call

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("File", "Citation", "Accession_ID", "Date", "PMID", "License")


@dataclass(frozen=True)
class FileListEntry:
    """One row of the mirror index CSV."""

    file_path: str
    citation: str
    accession_id: str
    date: str
    pmid: Optional[int]
    license: str


@dataclass(frozen=True)
class DownloadPolicy:
    max_requests_per_second: float = 3.0
    max_retries: int = 5
    retry_base_delay: float = 0.5
    keep_extensions: frozenset[str] = frozenset({"nxml", "jpg"})

    def __post_init__(self) -> None:
        if self.max_requests_per_second <= 0:
            raise ValidationError("max_requests_per_second must be > 0")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")


@dataclass(frozen=True)
class TransferInfo:
    """What one retrieve call produced, including any remote-reported size."""

    bytes_written: int
    expected_size: Optional[int] = None
    checksum: Optional[str] = None


class Transport(Protocol):
    """Remote file access; one ``retrieve`` call is one rate-limited request."""

    def retrieve(self, remote_path: str, dest: BinaryIO) -> TransferInfo: ...

    def list(self, remote_dir: str) -> list[str]: ...


class LocalDirTransport:
    """Transport reading a directory tree; doubles as a local-mirror backend."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def retrieve(self, remote_path: str, dest: BinaryIO) -> TransferInfo:
        src = self.root / remote_path
        if not src.is_file():
            raise TransientTransportError(f"no such remote file: {remote_path}")
        data = src.read_bytes()
        dest.write(data)
        return TransferInfo(bytes_written=len(data), expected_size=len(data))

    def list(self, remote_dir: str) -> list[str]:
        base = self.root / remote_dir
        return sorted(str(p.relative_to(self.root)) for p in base.rglob("*") if p.is_file())


class FtpTransport:
    """FTP-backed transport (one RETR, optionally preceded by SIZE, per retrieve)."""

    def __init__(self, host: str, user: str = "anonymous", passwd: str = "", timeout: float = 30.0):
        self.host = host
        self.user = user
        self.passwd = passwd
        self.timeout = timeout
        self._local = threading.local()

    def _conn(self):
        import ftplib

        ftp = getattr(self._local, "ftp", None)
        if ftp is None:
            ftp = ftplib.FTP(self.host, timeout=self.timeout)
            ftp.login(self.user, self.passwd)
            self._local.ftp = ftp
        return ftp

    def retrieve(self, remote_path: str, dest: BinaryIO) -> TransferInfo:
        import ftplib

        try:
            ftp = self._conn()
            try:
                expected = ftp.size(remote_path)
            except ftplib.error_perm:
                expected = None
            written = 0

            def sink(chunk: bytes) -> None:
                nonlocal written
                written += len(chunk)
                dest.write(chunk)

            ftp.retrbinary(f"RETR {remote_path}", sink)
            return TransferInfo(bytes_written=written, expected_size=expected)
        except (ftplib.error_temp, EOFError, ConnectionError, OSError) as exc:
            self._local.ftp = None
            raise TransientTransportError(str(exc)) from exc

    def list(self, remote_dir: str) -> list[str]:
        return sorted(self._conn().nlst(remote_dir))


def parse_file_list(csv_bytes: bytes | BinaryIO) -> list[FileListEntry]:
    """Parse the mirror index CSV into entries, preserving row order.

    The header must contain File, Citation, Accession_ID, Date, PMID and
    License (any order, extra columns ignored).  An empty PMID cell yields
    ``pmid=None``.  Duplicate File values are rejected.
    """
    if isinstance(csv_bytes, bytes):
        csv_bytes = io.BytesIO(csv_bytes)
    text = io.TextIOWrapper(csv_bytes, encoding="utf-8", newline="")
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("file list is empty (no header row)") from None
    except csv.Error as exc:
        raise ParseError(f"malformed CSV at row 1: {exc}") from exc

    positions: dict[str, int] = {}
    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise SchemaError(f"file list is missing required column {col!r}")
        positions[col] = header.index(col)

    entries: list[FileListEntry] = []
    seen_paths: set[str] = set()
    row_num = 1
    try:
        for row in reader:
            row_num += 1
            if not row:
                continue
            if len(row) < len(header):
                raise ParseError(f"malformed CSV at row {row_num}: expected {len(header)} fields, got {len(row)}")
            file_path = row[positions["File"]].strip()
            if not file_path:
                raise ValidationError(f"row {row_num}: empty File value")
            if file_path in seen_paths:
                raise ValidationError(f"duplicate File value in file list: {file_path!r}")
            seen_paths.add(file_path)
            accession = row[positions["Accession_ID"]].strip()
            if not accession:
                raise ValidationError(f"row {row_num}: empty Accession_ID value")
            pmid_cell = row[positions["PMID"]].strip()
            pmid = int(pmid_cell) if pmid_cell else None
            entries.append(
                FileListEntry(
                    file_path=file_path,
                    citation=row[positions["Citation"]].strip(),
                    accession_id=accession,
                    date=row[positions["Date"]].strip(),
                    pmid=pmid,
                    license=row[positions["License"]].strip(),
                )
            )
    except csv.Error as exc:
        raise ParseError(f"malformed CSV at row {row_num + 1}: {exc}") from exc
    return entries


def _meta_path(archive: Path) -> Path:
    return archive.with_name(archive.name + ".meta.json")


@dataclass(frozen=True)
class FetchResult:
    path: Path
    attempts: int
    skipped: bool


def fetch_package(
    entry: FileListEntry,
    policy: DownloadPolicy,
    transport: Transport,
    out_dir: str | Path,
    limiter: Optional[SlidingWindowLimiter] = None,
) -> Path:
    """Download one article package atomically; returns the local archive path.

    A sidecar ``<archive>.meta.json`` records the byte size so idempotent
    re-runs can skip without touching the transport.  Transient failures are
    retried per the policy; a remote-reported size that disagrees with the
    bytes written raises :class:`IntegrityError`.
    """
    return fetch_package_stats(entry, policy, transport, out_dir, limiter=limiter).path


def fetch_package_stats(
    entry: FileListEntry,
    policy: DownloadPolicy,
    transport: Transport,
    out_dir: str | Path,
    limiter: Optional[SlidingWindowLimiter] = None,
) -> FetchResult:
    """Like :func:`fetch_package` but also reports attempts and skip status."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / PurePosixPath(entry.file_path).name
    meta = _meta_path(target)

    if target.exists() and meta.exists():
        try:
            recorded = json.loads(meta.read_text())["size"]
        except (json.JSONDecodeError, KeyError):
            recorded = None
        if recorded is not None and target.stat().st_size == recorded:
            logger.info("skip %s: already downloaded (%d bytes)", entry.file_path, recorded)
            return FetchResult(path=target, attempts=0, skipped=True)

    limiter = limiter or SlidingWindowLimiter(policy.max_requests_per_second)
    tmp = target.with_name(target.name + ".part")

    def attempt() -> TransferInfo:
        limiter.acquire()
        with open(tmp, "wb") as fh:
            info = transport.retrieve(entry.file_path, fh)
            fh.flush()
            os.fsync(fh.fileno())
        return info

    try:
        info, attempts = retry_call(
            attempt,
            max_retries=policy.max_retries,
            base_delay=policy.retry_base_delay,
            retriable=(TransientTransportError,),
        )
    except FetchError:
        tmp.unlink(missing_ok=True)
        raise
    if info.expected_size is not None and info.expected_size != info.bytes_written:
        tmp.unlink(missing_ok=True)
        raise IntegrityError(
            f"{entry.file_path}: wrote {info.bytes_written} bytes, remote reported {info.expected_size}"
        )
    os.replace(tmp, target)
    meta.write_text(json.dumps({"size": info.bytes_written}))
    logger.info("fetched %s in %d attempt(s)", entry.file_path, attempts)
    return FetchResult(path=target, attempts=attempts, skipped=False)


def extract_package(
    archive: str | Path,
    policy: DownloadPolicy,
    dest_dir: str | Path,
) -> list[str]:
    """Extract kept-extension members of a .tar.gz under ``dest_dir``.

    All member names are validated before anything is written; traversal
    attempts raise :class:`SecurityError` and leave the target untouched.
    Returns kept paths (relative to ``dest_dir``) sorted lexicographically.
    """
    archive = Path(archive)
    dest_dir = Path(dest_dir)
    keep = {e.lower().lstrip(".") for e in policy.keep_extensions}
    try:
        with tarfile.open(archive, "r:gz") as tar:
            members = tar.getmembers()
            for m in members:
                name = PurePosixPath(m.name)
                if name.is_absolute() or ".." in name.parts:
                    raise SecurityError(f"{archive.name}: unsafe member path {m.name!r}")
                if m.islnk() or m.issym():
                    raise SecurityError(f"{archive.name}: link member {m.name!r} not allowed")
            kept: list[str] = []
            dest_dir.mkdir(parents=True, exist_ok=True)
            for m in members:
                if not m.isfile():
                    continue
                suffix = PurePosixPath(m.name).suffix.lower().lstrip(".")
                if suffix not in keep:
                    continue
                src = tar.extractfile(m)
                if src is None:
                    continue
                out_path = dest_dir / PurePosixPath(m.name)
                out_path.parent.mkdir(parents=True, exist_ok=True)
                with open(out_path, "wb") as fh:
                    fh.write(src.read())
                kept.append(str(PurePosixPath(m.name)))
    except tarfile.TarError as exc:
        raise ExtractionError(f"corrupt archive {archive}: {exc}") from exc
    return sorted(kept)


@dataclass
class IngestRecord:
    """One line of the ingest log."""

    file_path: str
    accession_id: str
    status: str  # ok | failed | skipped
    bytes: int = 0
    attempts: int = 0
    error: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def ingest_entries(
    entries: Sequence[FileListEntry],
    policy: DownloadPolicy,
    transport: Transport,
    out_dir: str | Path,
    max_workers: int = 4,
    log_path: Optional[str | Path] = None,
) -> list[IngestRecord]:
    """Fetch + extract every entry; fetches share one rate limiter.

    ``skipped`` means the archive was already present with a matching size
    (the extraction still runs so kept files are guaranteed on disk).
    """
    out_dir = Path(out_dir)
    archives_dir = out_dir / "archives"
    media_dir = out_dir / "media"
    limiter = SlidingWindowLimiter(policy.max_requests_per_second)

    def work(entry: FileListEntry) -> IngestRecord:
        try:
            result = fetch_package_stats(entry, policy, transport, archives_dir, limiter=limiter)
            extract_package(result.path, policy, media_dir)
            return IngestRecord(
                file_path=entry.file_path,
                accession_id=entry.accession_id,
                status="skipped" if result.skipped else "ok",
                bytes=result.path.stat().st_size,
                attempts=result.attempts,
            )
        except Exception as exc:  # logged per entry, run continues
            attempts = getattr(exc, "attempts", 0)
            return IngestRecord(
                file_path=entry.file_path,
                accession_id=entry.accession_id,
                status="failed",
                attempts=attempts,
                error=str(exc),
            )

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        records = list(pool.map(work, entries))

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(record.to_json() + "\n")
    return records
