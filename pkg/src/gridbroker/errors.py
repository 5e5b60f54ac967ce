"""Exception hierarchy shared by all broker layers."""


class BrokerError(Exception):
    """Base class for every error raised by the broker."""


# core model
class IllegalTransition(BrokerError):
    def __init__(self, state, event):
        super().__init__(f"illegal transition: {event} in state {state}")
        self.state = state
        self.event = event


class UnboundVariable(BrokerError):
    def __init__(self, name):
        super().__init__(f"unbound variable: {name}")
        self.name = name


class EmptyDomain(BrokerError):
    pass


class UnresolvedGridfile(BrokerError):
    pass


# interpreters
class ParseError(BrokerError):
    def __init__(self, message, path=None, locus=None):
        where = ""
        if path:
            where += f"{path}"
        if locus:
            where += f" [{locus}]"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.locus = locus


class ValidationError(BrokerError):
    def __init__(self, diagnostics):
        lines = "; ".join(str(d) for d in diagnostics)
        super().__init__(f"invalid application: {lines}")
        self.diagnostics = list(diagnostics)


class DuplicateServiceId(ParseError):
    pass


class UnknownServiceType(ParseError):
    pass


class MissingSecret(BrokerError):
    pass


class MissingKeyfile(BrokerError):
    pass


# persistence
class StoreIO(BrokerError):
    pass


class StoreValidationError(StoreIO):
    pass


class Locked(StoreIO):
    pass


class VersionMismatch(StoreIO):
    pass


class NoSuchInstance(StoreIO):
    pass


class MissingCredential(BrokerError):
    pass


class SimulatedCrash(BaseException):
    """Raised by fault injection to abandon a broker mid-write.

    Derives from BaseException so worker code that isolates per-job
    failures with ``except Exception`` cannot swallow it.
    """


# scheduler
class NoReplica(BrokerError):
    def __init__(self, logical_name):
        super().__init__(f"no replica for {logical_name}")
        self.logical_name = logical_name


class NoFittingQueue(BrokerError):
    pass


# execution
class ExecutionError(BrokerError):
    """Remote operation failed; the job takes the failure path."""


class UnsupportedAdapter(ExecutionError):
    pass


class TransferFailed(ExecutionError):
    def __init__(self, file, reason=""):
        super().__init__(f"transfer failed: {file}" + (f" ({reason})" if reason else ""))
        self.file = file


class SubmitFailed(ExecutionError):
    pass


class SubmitTimeout(SubmitFailed):
    pass


class PollFailed(ExecutionError):
    pass


class RetrieveFailed(ExecutionError):
    pass


class CleanupFailed(ExecutionError):
    pass


class ProbeFailed(ExecutionError):
    pass


class TransientTimeout(ExecutionError):
    """A transient task exceeded its time limit."""


class StartupError(BrokerError):
    """Raised before any dispatch when a run cannot start."""
