import os
from datetime import datetime
from logging import (
    INFO,
    WARNING,
    FileHandler,
    Formatter,
    LogRecord,
    StreamHandler,
    getLogger,
)

from pytz import timezone

getLogger("trimesh").setLevel(WARNING)
getLogger("asyncio").setLevel(WARNING)

__version__ = "0.3.0"

LOG_TIMEZONE = "UTC"


class CustomFormatter(Formatter):
    def formatTime(
        self,
        record: LogRecord,
        datefmt: str | None,
    ) -> str:
        dt: datetime = datetime.fromtimestamp(
            record.created,
            tz=timezone(LOG_TIMEZONE),
        )
        return dt.strftime(datefmt)

    def format(self, record: LogRecord) -> str:
        return super().format(record).replace(record.levelname, record.levelname[:1])


formatter = CustomFormatter(
    "[%(asctime)s] %(levelname)s - %(message)s [%(module)s:%(lineno)d]",
    datefmt="%d-%b %I:%M:%S %p",
)

stream_handler = StreamHandler()
stream_handler.setFormatter(formatter)

LOGGER = getLogger(__name__)
LOGGER.setLevel(INFO)
if not LOGGER.handlers:
    LOGGER.addHandler(stream_handler)


def set_log_timezone(name: str):
    global LOG_TIMEZONE  # noqa: PLW0603
    timezone(name)
    LOG_TIMEZONE = name


def add_log_file(path: str):
    file_handler = FileHandler(path)
    file_handler.setFormatter(formatter)
    LOGGER.addHandler(file_handler)
    return file_handler


cpu_no = os.cpu_count() or 1

