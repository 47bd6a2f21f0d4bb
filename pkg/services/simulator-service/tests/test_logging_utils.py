"""Tests for logging_utils.py"""

import json
import logging

from pythonjsonlogger.json import JsonFormatter

from app.utils.logging_utils import setup_logging


class TestSetupLogging:
    """Test root handler configuration."""

    def teardown_method(self):
        logging.getLogger().handlers.clear()

    def test_json_format(self):
        setup_logging("DEBUG", fmt="json")
        handler = logging.getLogger().handlers[0]
        assert isinstance(handler.formatter, JsonFormatter)

        record = logging.LogRecord("app.core.cluster", logging.INFO, __file__, 1, "replanned", None, None)
        payload = json.loads(handler.format(record))
        assert payload["message"] == "replanned"
        assert payload["levelname"] == "INFO"
        assert payload["name"] == "app.core.cluster"

    def test_text_format(self):
        setup_logging("warning")
        root = logging.getLogger()
        assert root.level == logging.WARNING
        assert not isinstance(root.handlers[0].formatter, JsonFormatter)
