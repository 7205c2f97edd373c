"""The protected file set: ordered entries of (path, size, chunk leaf digests)."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class FileEntry:
    path: str
    size: int
    chunk_hashes: list[bytes] = field(default_factory=list)

    def validate(self, chunk_size: int | None = None) -> None:
        if self.size < 0:
            raise ValueError(f"{self.path}: negative size")
        for h in self.chunk_hashes:
            if len(h) != 32:
                raise ValueError(f"{self.path}: chunk hash must be 32 bytes")
        if chunk_size is not None:
            expected = -(-self.size // chunk_size) if self.size else 0
            if len(self.chunk_hashes) != expected:
                raise ValueError(
                    f"{self.path}: {len(self.chunk_hashes)} chunk hashes, "
                    f"expected {expected} for size {self.size}"
                )


@dataclass
class FileManifest:
    """Entries sorted by path byte order; an empty file has zero chunk hashes."""

    entries: list[FileEntry] = field(default_factory=list)

    def validate(self, chunk_size: int | None = None) -> None:
        keys = [e.path.encode("utf-8") for e in self.entries]
        if keys != sorted(keys):
            raise ValueError("manifest entries not sorted by path byte order")
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate path in manifest")
        for entry in self.entries:
            entry.validate(chunk_size)

    def find(self, path: str) -> FileEntry | None:
        for entry in self.entries:
            if entry.path == path:
                return entry
        return None

    def insert(self, entry: FileEntry) -> None:
        """Insert keeping byte order; the path must not already exist."""
        key = entry.path.encode("utf-8")
        for i, existing in enumerate(self.entries):
            existing_key = existing.path.encode("utf-8")
            if existing_key == key:
                raise ValueError(f"duplicate path: {entry.path}")
            if existing_key > key:
                self.entries.insert(i, entry)
                return
        self.entries.append(entry)
