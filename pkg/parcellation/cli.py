"""``parcel`` outside manage.py: ``run(argv)`` returns the process exit code."""
import os
import sys
from typing import Optional, Sequence

import django


def run(argv: Optional[Sequence[str]] = None) -> int:
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings")
    django.setup()
    from parcellation.management.commands.parcel import Command

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        Command().run_from_argv(["manage.py", "parcel", *argv])
    except SystemExit as exc:
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else 1
    return 0


if __name__ == "__main__":
    sys.exit(run())
