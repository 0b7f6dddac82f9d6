"""Workload runner, metrics report and command-line front end."""
