import os
import random
import shutil
import uuid
from pathlib import Path

import pytest

from crisp.merkle import FileEntry, FileManifest


def random_manifest(rng: random.Random, max_files: int = 16, max_chunks: int = 32) -> FileManifest:
    n_files = rng.randrange(0, max_files + 1)
    paths = sorted(
        {f"d{rng.randrange(4)}/f{rng.randrange(1000):03d}.bin" for _ in range(n_files)},
        key=lambda p: p.encode(),
    )
    entries = []
    for path in paths:
        n_chunks = rng.randrange(0, max_chunks + 1)
        size = 0 if n_chunks == 0 else (n_chunks - 1) * 4096 + rng.randrange(1, 4097)
        entries.append(
            FileEntry(
                path=path,
                size=size,
                chunk_hashes=[rng.randbytes(32) for _ in range(n_chunks)],
            )
        )
    return FileManifest(entries=entries)


@pytest.fixture
def shm_tmpdir():
    """Working directory on tmpfs when available; timing-sensitive tests and
    benches need fsync to be cheap."""
    base = Path("/dev/shm") if os.access("/dev/shm", os.W_OK) else None
    if base is None:
        pytest.skip("no tmpfs available")
    path = base / f"crisp-test-{uuid.uuid4().hex[:12]}"
    path.mkdir()
    try:
        yield path
    finally:
        shutil.rmtree(path, ignore_errors=True)
