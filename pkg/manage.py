#!/usr/bin/env python
"""splatcam's command-line utility: generate, train, infer, render, eval, selftest, compare."""
import os
import sys


def main():
    """Run a splatcam command."""
    sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
    try:
        from splatcam.settings import configure_logging
        from main.urls import main as dispatch
    except ImportError as exc:
        raise ImportError(
            "Couldn't import splatcam's dependencies. Are torch, click and pydantic installed "
            "and available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    if sys.argv[1:2] == ["test"]:
        import pytest
        sys.exit(pytest.main(sys.argv[2:] or ["common/tests.py", "main/tests"]))
    configure_logging()
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == '__main__':
    main()
