from steering.cli import cli
from steering.config import config
from steering.logging_config import init_logging


def run():
    init_logging(config.LOG_LEVEL)
    cli(prog_name="steering")


if __name__ == "__main__":
    run()
