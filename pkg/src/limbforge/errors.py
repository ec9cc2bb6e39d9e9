"""Exception hierarchy shared across the limbforge package."""


class LimbforgeError(Exception):
    """Base class for all limbforge errors."""


# --- parameter / crypto setup ---

class NoSuchPrimes(LimbforgeError):
    """The prime search under the word-size bound ran out of candidates."""


class ScaleOverflow(LimbforgeError):
    """Encoded coefficients would exceed the composite modulus headroom."""


class MissingEvalKey(LimbforgeError):
    """A keyswitch site needs an evaluation key that was not provided."""


# --- circuit metadata ---

class LevelMismatch(LimbforgeError):
    pass


class ScaleMismatch(LimbforgeError):
    pass


class LevelExhausted(LimbforgeError):
    pass


class MissingRotationKey(LimbforgeError):
    pass


class BadStride(LimbforgeError):
    pass


# --- frontend parsing ---

class ParseError(LimbforgeError):
    """Syntax error in circuit text; carries a 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownOp(ParseError):
    pass


class DuplicateDefinition(ParseError):
    pass


# --- compression ---

class NotPeriodic(LimbforgeError):
    pass


class BaseMismatch(LimbforgeError):
    pass


# --- BSGS emitter ---

class PlanTooSmall(LimbforgeError):
    pass


# --- codegen ---

class UnsplittableKernel(LimbforgeError):
    """A single instruction exceeds the configured kernel budgets."""


# --- scheduling / runtime ---

class UseBeforeDef(LimbforgeError):
    pass


class BudgetInfeasible(LimbforgeError):
    """Pinned memory demand exceeds the device capacity budget."""


class UnresolvedFunction(LimbforgeError):
    pass


class PoolUnbound(LimbforgeError):
    pass


class DeadlockDetected(LimbforgeError):
    """Communication dependencies formed a cycle during simulation."""
