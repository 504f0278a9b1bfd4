import sys
from argparse import ArgumentParser
from asyncio import run

from . import LOGGER, __version__, add_log_file, set_log_timezone
from .core.config_manager import Config, SystemEnv
from .core.handlers import add_handlers
from .helper.ext_utils.exceptions import HandSdfException
from .helper.ext_utils.task_utils import set_thread_count

IO_EXIT_CODE = 4


def build_parser():
    parser = ArgumentParser(
        prog="handsdf",
        description="Articulation-conditioned SDF reconstruction of hand-held objects",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    add_handlers(parser)
    return parser


def load_config(args):
    """defaults < config.py < --config json < environment < flags"""
    Config.load()
    if args.config_file:
        Config.load_json(args.config_file)
    SystemEnv.load()
    for key, value in vars(args).items():
        if key.isupper() and value is not None:
            Config.set(key, value)
    set_log_timezone(Config.LOG_TIMEZONE)
    if Config.LOG_FILE:
        add_log_file(Config.LOG_FILE)
    set_thread_count(Config.THREADS)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        try:
            load_config(args)
        except (KeyError, TypeError) as e:
            LOGGER.error(f"Invalid configuration: {e}")
            return 2
        LOGGER.info(f"Running {args.command}")
        run(args.handler(args))
    except HandSdfException as e:
        LOGGER.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        LOGGER.error(f"I/O failure: {e}")
        return IO_EXIT_CODE
    return 0


if __name__ == "__main__":
    sys.exit(main())
