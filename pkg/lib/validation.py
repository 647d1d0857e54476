import csv
import math
from dataclasses import dataclass


@dataclass
class CheckOutcome:
    """
    One row of a validation report.
    """
    check: str
    manifold: str
    value: float
    limit: float
    passed: bool
    detail: str = ""


REPORT_COLUMNS = ("check", "manifold", "value", "limit", "passed", "detail")


class CompositeCheckRunner:
    """
    Mixin for action layers whose composite actions run many atomic checks and
    collect outcomes instead of stopping at the first failed assertion.
    """

    def run_check(self, outcomes, check, manifold, limit, action, *args, **kwargs):
        """
        Runs one `*_and_verify` action and records its outcome.

        Args:
            outcomes (list): Report rows collected so far; appended in place.
            check (str): Report name of the check.
            manifold (str): Manifold the check ran on.
            limit (float): Tolerance the action asserts against.
            action (callable): The atomic action; its return value is recorded.

        Returns:
            CheckOutcome: The recorded row.
        """
        try:
            value = action(*args, **kwargs)
            outcome = CheckOutcome(check, manifold, float(value), float(limit), True)
        except AssertionError as error:
            outcome = CheckOutcome(check, manifold, math.nan, float(limit), False, str(error))
        outcomes.append(outcome)
        return outcome


def write_check_report(path, outcomes):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_COLUMNS)
        for outcome in outcomes:
            writer.writerow([
                outcome.check,
                outcome.manifold,
                repr(outcome.value),
                repr(outcome.limit),
                "pass" if outcome.passed else "FAIL",
                outcome.detail,
            ])


def all_passed(outcomes):
    return all(outcome.passed for outcome in outcomes)
