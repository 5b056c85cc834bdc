#!/usr/bin/env python
"""Django's command-line utility, and the entry point of the routing lab's pipeline."""
import os
import sys


def main():
    """Run the lab's pipeline commands or Django's administrative tasks."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'moerlab.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc

    from experts.cli import SUBCOMMANDS, cli_main

    if len(sys.argv) > 1 and sys.argv[1] in SUBCOMMANDS:
        sys.exit(cli_main(sys.argv[1:]))
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
