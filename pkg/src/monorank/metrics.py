from fractions import Fraction

from .errors import ContractError


def precision_at_k(predicted, relevant, k, exact=False):
    """Fraction of the top-``k`` predictions that are relevant.

    When fewer than ``k`` items are relevant, the denominator is the number
    of relevant items instead of ``k``.  With ``exact=True`` the result is a
    :class:`fractions.Fraction`.
    """
    if not isinstance(k, int) or k < 1:
        raise ContractError(f"k must be a positive integer, got {k!r}")
    predicted = list(predicted)
    if not predicted:
        raise ContractError("predicted must contain at least one id")
    relevant = set(relevant)
    denom = min(k, len(relevant))
    if denom == 0:
        return Fraction(0) if exact else 0.0
    hits = len(set(predicted[:k]) & relevant)
    value = Fraction(hits, denom)
    return value if exact else float(value)
