"""Rollback-protected encrypted chunk storage.

Volumes are directories of AEAD-encrypted chunks whose Merkle-root tag is
sealed into a vault file together with a promised monotonic-counter value.
Commits are batched optimistically; a blocking checker lets callers wait
until their writes are counter-protected.
"""

__version__ = "0.1.0"
