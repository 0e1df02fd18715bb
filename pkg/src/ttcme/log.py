import logging

from ttcme.settings import get_settings


def get_default_logger(name: str = "ttcme") -> logging.Logger:
    """Create a default logger with standard configuration.

    Args:
        name (str): Logger name, ``ttcme.<module>`` by convention

    Returns:
        logging.Logger: Configured logger instance with standard formatting
    """
    logger = logging.getLogger(name)
    # handlers on the package logger come from the command line front end
    if name != "ttcme" and logging.getLogger("ttcme").handlers:
        return logger
    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)
        logger.setLevel(get_settings().log_level)
        logger.propagate = False
    return logger
