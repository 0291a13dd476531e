import logging
from logging.handlers import RotatingFileHandler
import click

LOG_FORMAT = '[%(name)s] %(levelname)s - %(message)s'
FILE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = 'uldpfl.log'


def configure_logging(loglevel: str, logfile: bool, serving: bool = False):
    """
    Console logging for every subcommand; optional rotating file output.
    `serving` quiets werkzeug/click when the JSON API runs.
    """
    numeric_level = getattr(logging, loglevel.upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f'Invalid log level: {loglevel}')

    logging.basicConfig(level=numeric_level, format=LOG_FORMAT)

    if serving and numeric_level > logging.DEBUG:
        disable_flask_logging()

    if logfile:
        handler = RotatingFileHandler(LOG_FILE, maxBytes=100000, backupCount=3)
        handler.setLevel(numeric_level)
        handler.setFormatter(logging.Formatter(FILE_FORMAT))
        logging.getLogger().addHandler(handler)


def disable_flask_logging() -> None:

    def override_click_logging():
        def secho(message=None, file=None, nl=None, err=None, color=None, **styles):
            pass

        def echo(message=None, file=None, nl=None, err=None, color=None, **styles):
            pass

        click.echo = echo
        click.secho = secho
    werkzeug_log = logging.getLogger('werkzeug')
    werkzeug_log.setLevel(logging.ERROR)

    override_click_logging()
