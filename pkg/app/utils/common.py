import logging
import logging.config
import os
from app.dependencies import get_settings


def setup_logging():
    """
    Sets up logging for the application using a configuration file.
    This ensures standardized logging across the entire application.
    """
    settings = get_settings()
    logging_config_path = settings.logging_config
    if not os.path.isabs(logging_config_path):
        # Relative paths are resolved against the project root.
        logging_config_path = os.path.join(os.path.dirname(__file__), '..', '..', logging_config_path)
    normalized_path = os.path.normpath(logging_config_path)
    if os.path.exists(normalized_path):
        logging.config.fileConfig(normalized_path, disable_existing_loggers=False)
    else:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        logging.getLogger(__name__).warning(f"Logging config {normalized_path} not found, using basic config")
    if settings.debug:
        logging.getLogger().setLevel(logging.DEBUG)
