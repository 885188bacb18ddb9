import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

from fie_reader.core.config import Config, load_dotenv


class TestConfigFromEnv(unittest.TestCase):
    def test_defaults(self):
        with mock.patch.dict(os.environ, {"FIE_READER_DOTENV": "/nonexistent/.env"}, clear=True):
            cfg = Config.from_env()
        self.assertEqual(cfg.log_level, "INFO")
        self.assertEqual(cfg.precision, "f64")
        self.assertTrue(cfg.tracing_enabled)
        self.assertTrue(cfg.progress)
        self.assertFalse(cfg.slow_tests)

    def test_overrides_and_invalid_values(self):
        env = {
            "FIE_READER_DOTENV": "/nonexistent/.env",
            "FIE_READER_LOG_LEVEL": "debug",
            "FIE_READER_PRECISION": "f16",
            "FIE_READER_PROGRESS": "off",
            "FIE_READER_SLOW_TESTS": "yes",
        }
        with mock.patch.dict(os.environ, env, clear=True):
            cfg = Config.from_env()
        self.assertEqual(cfg.log_level, "DEBUG")
        self.assertEqual(cfg.precision, "f64")
        self.assertFalse(cfg.progress)
        self.assertTrue(cfg.slow_tests)


class TestDotenv(unittest.TestCase):
    def test_existing_variables_win(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / ".env"
            path.write_text('# run settings\nFIE_READER_PRECISION="f32"\nFIE_READER_LOG_LEVEL=ERROR\nnot a pair\n', encoding="utf-8")
            with mock.patch.dict(os.environ, {"FIE_READER_LOG_LEVEL": "WARNING"}, clear=True):
                loaded = load_dotenv(path)
                self.assertEqual(loaded, ["FIE_READER_PRECISION"])
                self.assertEqual(os.environ["FIE_READER_PRECISION"], "f32")
                self.assertEqual(os.environ["FIE_READER_LOG_LEVEL"], "WARNING")

    def test_missing_file(self):
        self.assertEqual(load_dotenv("/nonexistent/.env"), [])


if __name__ == "__main__":
    unittest.main()
