"""Exception hierarchy shared by all crisp components."""


class CrispError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CrispError):
    pass


# --- monotonic counter ---


class CounterError(CrispError):
    pass


class StateExists(CounterError):
    """Provisioning refused: a valid counter state file is already present."""


class AuthFailure(CounterError):
    """Counter state failed MAC verification (tampered or wrong key)."""


class Exhausted(CounterError):
    """Counter reached its usage limit."""


# --- volume / startup verdicts ---


class VolumeError(CrispError):
    pass


class NotEmpty(VolumeError):
    """Target directory for a new volume is not empty."""


class VaultAuthFailure(VolumeError):
    """Vault file could not be unsealed (tampered or wrong key/epoch)."""


class CounterIdentityMismatch(VolumeError):
    """Vault was bound to a different counter than the one supplied."""


class TagMismatch(VolumeError):
    """On-disk data does not reproduce the tag recorded in the vault."""


class RollbackDetected(VolumeError):
    """Counter is ahead of the vault: an older committed state was restored."""


class IncompleteCommit(VolumeError):
    """Vault is ahead of the counter: crash between vault write and increment."""


class DecryptFailure(VolumeError):
    """A chunk failed authenticated decryption at read time."""


class SnapshotNotFound(VolumeError):
    pass


class UnknownPath(CrispError):
    """Tag update referenced a path that is neither present nor being created."""


# --- commit pipeline ---


class PipelineHalted(CrispError):
    """The committer halted permanently; carries the halt reason."""

    def __init__(self, reason: str = "halted"):
        super().__init__(reason)
        self.reason = reason


class DeadlineExceeded(CrispError):
    pass


# --- attack harness ---


class ScriptError(CrispError):
    pass
