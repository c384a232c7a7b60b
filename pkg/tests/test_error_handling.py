import unittest
from unittest.mock import patch

from utils.error_handling import (
    EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, EXIT_VERIFICATION,
    CheckpointError, ConfigurationError, ContractError, DataLoadingError, DimensionError, EcgNatException,
    ErrorCategory, MLEvaluationError, MLTrainingError, NeighborhoodIndexError, ValidationError,
    VerificationError, exit_code_for, format_error, handle_error
)


class TestExceptionHierarchy(unittest.TestCase):
    def test_categories(self):
        self.assertEqual(ValidationError("x").category, ErrorCategory.VALIDATION)
        self.assertEqual(CheckpointError("x").category, ErrorCategory.CHECKPOINT)
        self.assertEqual(DimensionError("x").category, ErrorCategory.CONTRACT)

    def test_neighborhood_index_error_is_index_error(self):
        with self.assertRaises(IndexError):
            raise NeighborhoodIndexError("Position 10 outside sequence of length 10")
        self.assertTrue(issubclass(NeighborhoodIndexError, ContractError))

    def test_validation_error_lists_every_problem(self):
        error = ValidationError("Invalid run configuration", ["batch_size must be >= 1", "alpha must be in [0, 1]"])
        self.assertEqual(len(error.errors), 2)
        self.assertIn("- batch_size must be >= 1", error.details)
        self.assertIn("- alpha must be in [0, 1]", error.details)

    def test_dimension_error_names_axes(self):
        error = DimensionError("Shape mismatch", {"q": (2, 3), "k": (2, 4)})
        self.assertEqual(error.axes["k"], (2, 4))
        self.assertEqual(error.details, "q=(2, 3), k=(2, 4)")


class TestExitCodes(unittest.TestCase):
    def test_mapping(self):
        self.assertEqual(EXIT_OK, 0)
        self.assertEqual(exit_code_for(ValidationError("x")), EXIT_VALIDATION)
        self.assertEqual(exit_code_for(ConfigurationError("x")), EXIT_VALIDATION)
        self.assertEqual(exit_code_for(VerificationError("x")), EXIT_VERIFICATION)
        self.assertEqual(exit_code_for(CheckpointError("x")), EXIT_RUNTIME)
        self.assertEqual(exit_code_for(DataLoadingError("x")), EXIT_RUNTIME)
        self.assertEqual(exit_code_for(RuntimeError("x")), EXIT_RUNTIME)

    def test_ml_training_error_handling(self):
        """Training errors are logged with their model state."""
        error = MLTrainingError(message="Training failed", details="Loss became NaN",
                                model_state={'epoch': 5, 'loss': 2.5})
        with self.assertLogs('utils.error_handling', level='ERROR') as log:
            code = handle_error(error)
        self.assertEqual(code, EXIT_RUNTIME)
        self.assertTrue(any("Training Error: Training failed" in msg for msg in log.output))
        self.assertTrue(any("model_state" in msg for msg in log.output))

    def test_validation_errors_log_without_traceback(self):
        with patch('utils.error_handling.logger') as mock_logger:
            code = handle_error(ValidationError("bad", ["one"]))
        self.assertEqual(code, EXIT_VALIDATION)
        mock_logger.error.assert_called_once()
        self.assertNotIn('exc_info', mock_logger.error.call_args.kwargs)

    def test_unexpected_errors_log_traceback(self):
        with patch('utils.error_handling.logger') as mock_logger:
            handle_error(KeyError("boom"))
        self.assertTrue(mock_logger.error.call_args.kwargs['exc_info'])


class TestFormatError(unittest.TestCase):
    def test_file_errors_include_path(self):
        text = format_error(CheckpointError("Not an ECG-NAT checkpoint (bad magic)", file_path="run/x.ckpt"))
        self.assertEqual(text, "CheckpointError: Not an ECG-NAT checkpoint (bad magic)\npath: run/x.ckpt")

    def test_details_are_appended(self):
        text = format_error(ConfigurationError("Bad window", "window_k must be odd"))
        self.assertEqual(text.splitlines(), ["ConfigurationError: Bad window", "window_k must be odd"])

    def test_evaluation_error_includes_metrics(self):
        text = format_error(MLEvaluationError("AUROC undefined", metrics={"accuracy": 1.0}))
        self.assertTrue(text.startswith("Evaluation Error: AUROC undefined"))
        self.assertIn("accuracy", text)

    def test_foreign_exceptions(self):
        self.assertEqual(format_error(ValueError("nope")), "ValueError: nope")

    def test_base_exception_message(self):
        error = EcgNatException("plain")
        self.assertEqual(str(error), "plain")
        self.assertIsNone(error.details)


if __name__ == '__main__':
    unittest.main()
