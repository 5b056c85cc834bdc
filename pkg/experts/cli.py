"""
``cli_main``: the lab's pipeline commands with stable exit codes.

    0  success
    1  bad input: unknown subcommand or flag, invalid config, missing artifact
    2  runtime failure: degenerate calibration, policy contract violation, I/O
"""
import logging
import os
import sys

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

SUBCOMMANDS = ('gen-model', 'gen-corpus', 'profile', 'calibrate', 'identify', 'run', 'compare', 'report')

logger = logging.getLogger(__name__)


def usage():
    return 'usage: manage.py {%s} [--config PATH] [--seed N] [options]\n' % ','.join(SUBCOMMANDS)


def cli_main(argv=None, stdout=None, stderr=None):
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'moerlab.settings')
    import django
    django.setup()

    from django.core.management import load_command_class
    from django.core.management.base import CommandError
    from rest_framework.exceptions import ValidationError

    from experts.exceptions import CalibrationError, ConfigurationError, ContractViolation, InvalidArgument

    argv = list(sys.argv[1:] if argv is None else argv)
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr

    if not argv or argv[0] not in SUBCOMMANDS:
        if argv:
            stderr.write(f"Unknown subcommand '{argv[0]}'\n")
        stderr.write(usage())
        return EXIT_INVALID

    name = argv[0]
    command = load_command_class('experts', name.replace('-', '_'))
    try:
        parser = command.create_parser('manage.py', name)
        options = vars(parser.parse_args(argv[1:]))
        args = options.pop('args', ())
        command.execute(*args, stdout=stdout, stderr=stderr, **options)
    except SystemExit as exc:
        # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except CommandError as exc:
        stderr.write(f'{name}: {exc}\n')
        if exc.returncode == 1:
            stderr.write(usage())
        return exc.returncode
    except (InvalidArgument, ConfigurationError, ValidationError) as exc:
        stderr.write(f'{name}: {exc}\n')
        return EXIT_INVALID
    except (CalibrationError, ContractViolation, OSError) as exc:
        stderr.write(f'{name}: {exc}\n')
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception('%s failed', name)
        stderr.write(f'{name}: unexpected error: {exc}\n')
        return EXIT_RUNTIME
    return EXIT_OK
