#!/usr/bin/env python3
"""
Unit tests for pipeline error handling.

Tests error categorization, exit codes, and message formatting.
"""
import os
import sys
import unittest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.error_handler import (
    EXIT_RUNTIME, EXIT_VALIDATION, ConfigError, DeadEmbeddingError, DegenerateDirectionError,
    ErrorCategory, ErrorParser, FormatError, NotSeparatedError, SeparationInfeasibleError,
    ShapeMismatchError, ValidationError, exit_code_for, format_error_for_display,
)


class TestErrorParsing(unittest.TestCase):
    """Test error parsing and categorization."""

    def test_validation_error(self):
        """Validation failures are input errors with exit code 1."""
        error = ErrorParser.parse_error(ValidationError("need at least 2 classes"))

        self.assertEqual(error.category, ErrorCategory.VALIDATION)
        self.assertEqual(error.exit_code, EXIT_VALIDATION)
        self.assertIn("validation", error.user_message.lower())
        self.assertTrue(len(error.suggestions) > 0)

    def test_format_error_carries_location(self):
        """Format errors name the file and line."""
        exc = FormatError("bad header", line=3, path="a.params")
        error = ErrorParser.parse_error(exc)

        self.assertEqual(error.category, ErrorCategory.FORMAT)
        self.assertEqual(error.exit_code, EXIT_VALIDATION)
        self.assertIn("a.params:3", error.message)
        self.assertEqual(exc.line, 3)

    def test_config_error(self):
        """Config errors report the line number."""
        error = ErrorParser.parse_error(ConfigError("unknown key 'lr'", 7))

        self.assertEqual(error.category, ErrorCategory.CONFIG)
        self.assertIn("line 7", error.message)
        self.assertIn("config", error.user_message.lower())

    def test_shape_mismatch_is_input_error(self):
        """Shape mismatches exit with code 1."""
        error = ErrorParser.parse_error(ShapeMismatchError("dims differ"))
        self.assertEqual(error.exit_code, EXIT_VALIDATION)

    def test_dead_embedding_is_runtime(self):
        """A dead embedding is a degenerate-direction runtime failure."""
        exc = DeadEmbeddingError()
        self.assertIsInstance(exc, DegenerateDirectionError)
        error = ErrorParser.parse_error(exc)

        self.assertEqual(error.category, ErrorCategory.DEGENERATE)
        self.assertEqual(error.exit_code, EXIT_RUNTIME)
        self.assertEqual(error.message, "dead embedding")

    def test_not_separated(self):
        """Mining on unseparated statistics is a runtime failure with guidance."""
        error = ErrorParser.parse_error(NotSeparatedError(details="mu+=0.1 mu-=0.2"))

        self.assertEqual(error.category, ErrorCategory.NOT_SEPARATED)
        self.assertEqual(error.exit_code, EXIT_RUNTIME)
        self.assertEqual(error.technical_details, "mu+=0.1 mu-=0.2")
        self.assertIn("warmup", error.suggestions[0].lower())

    def test_infeasible_generator(self):
        """The generator's give-up message is preserved."""
        error = ErrorParser.parse_error(SeparationInfeasibleError())
        self.assertEqual(error.message, "separation infeasible at this dim")
        self.assertEqual(error.exit_code, EXIT_RUNTIME)

    def test_file_not_found_exception(self):
        """Test handling of FileNotFoundError exception."""
        error = ErrorParser.parse_error(FileNotFoundError("no such file: x.data"))

        self.assertEqual(error.category, ErrorCategory.IO)
        self.assertEqual(error.exit_code, EXIT_RUNTIME)
        self.assertIn("file", error.user_message.lower())

    def test_unexpected_exception(self):
        """Anything else is a crash."""
        error = ErrorParser.parse_error(ZeroDivisionError("division by zero"))

        self.assertEqual(error.category, ErrorCategory.CRASH)
        self.assertEqual(error.exit_code, EXIT_RUNTIME)
        self.assertIn("ZeroDivisionError", error.user_message)


class TestExitCodes(unittest.TestCase):
    """Test the category to exit code mapping."""

    def test_input_categories(self):
        """Bad input maps to 1."""
        for category in (ErrorCategory.VALIDATION, ErrorCategory.CONFIG, ErrorCategory.FORMAT,
                         ErrorCategory.SHAPE_MISMATCH):
            self.assertEqual(exit_code_for(category), EXIT_VALIDATION)

    def test_runtime_categories(self):
        """Everything else maps to 2."""
        for category in (ErrorCategory.DEGENERATE, ErrorCategory.NOT_SEPARATED,
                         ErrorCategory.IO, ErrorCategory.CRASH):
            self.assertEqual(exit_code_for(category), EXIT_RUNTIME)


class TestErrorFormatting(unittest.TestCase):
    """Test error message formatting."""

    def test_format_includes_suggestions(self):
        """Test that formatted error includes suggestions."""
        error = ErrorParser.parse_error(ValidationError("too few classes"))
        formatted = format_error_for_display(error)

        self.assertIn("Input validation failed", formatted)
        for suggestion in error.suggestions:
            self.assertIn(suggestion, formatted)

    def test_format_with_technical_details(self):
        """Test formatting with technical details."""
        error = ErrorParser.parse_error(ValidationError("bad", details="3 classes, 1 usable"))

        with_details = format_error_for_display(error, include_technical=True)
        without_details = format_error_for_display(error, include_technical=False)

        self.assertIn("3 classes, 1 usable", with_details)
        self.assertNotIn("3 classes, 1 usable", without_details)


if __name__ == '__main__':
    unittest.main()
