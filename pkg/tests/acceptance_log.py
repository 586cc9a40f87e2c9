"""Pass/fail lines collected by the acceptance suite, echoed at session end."""

LINES: list[str] = []
