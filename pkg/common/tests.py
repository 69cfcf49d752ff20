import unittest

import torch

from common.exceptions import (ConfigError, ContractViolation, DataError, HarnessError, NumericalFault,
                               PlyFormatError, ScheduleError, SplatcamError)
from common.numerics import (VERIFY_DTYPE, check_primitive, forward_backward, grad_check, is_verification_mode,
                             line_search_descent, verification_mode)


class ExceptionHierarchyTest(unittest.TestCase):
    def test_contract_errors_are_value_errors(self):
        for cls in (ContractViolation, ConfigError, ScheduleError):
            self.assertTrue(issubclass(cls, ValueError))
            self.assertTrue(issubclass(cls, SplatcamError))

    def test_data_errors_are_not_contract_errors(self):
        self.assertTrue(issubclass(PlyFormatError, DataError))
        self.assertFalse(issubclass(DataError, ContractViolation))

    def test_ply_error_reports_offset(self):
        error = PlyFormatError("truncated body", offset=120)
        self.assertEqual(error.offset, 120)
        self.assertIn("120", str(error))

    def test_numerical_fault_names_the_op(self):
        fault = NumericalFault("softmax", diagnostics={"step": 3})
        self.assertIsInstance(fault, ArithmeticError)
        self.assertEqual(fault.op_name, "softmax")
        self.assertEqual(fault.diagnostics, {"step": 3})
        self.assertIn("softmax", str(fault))


class GradCheckTest(unittest.TestCase):
    def test_smooth_op_passes(self):
        x = torch.linspace(-1.0, 1.0, 7, dtype=VERIFY_DTYPE)
        report = grad_check(torch.sin, [x], name="sin")
        self.assertTrue(report.passed)
        self.assertEqual(report.element_count, 7)
        self.assertLess(report.max_relative_error, 1e-4)

    def test_wrong_gradient_fails(self):
        def broken(x):
            return x + x.detach() ** 2

        report = grad_check(broken, [torch.tensor([1.0, 2.0], dtype=VERIFY_DTYPE)], name="broken")
        self.assertFalse(report.passed)
        self.assertGreater(report.max_relative_error, 1e-2)

    def test_nondeterministic_op_is_rejected(self):
        def noisy(x):
            return x * torch.rand(())

        with self.assertRaises(HarnessError):
            grad_check(noisy, [torch.ones(3, dtype=VERIFY_DTYPE)], name="noisy")

    def test_no_float_inputs_is_rejected(self):
        with self.assertRaises(HarnessError):
            grad_check(lambda n: torch.ones(()) * n, [3], name="const")

    def test_registered_softmax(self):
        reports = check_primitive("softmax", seeds=range(3))
        self.assertEqual(len(reports), 3)
        self.assertTrue(all(r.passed for r in reports))

    def test_unknown_primitive(self):
        with self.assertRaises(HarnessError):
            check_primitive("no_such_op")


class ForwardBackwardTest(unittest.TestCase):
    def test_gradients_reach_leaves(self):
        x = torch.tensor([1.0, 2.0], requires_grad=True)
        forward_backward((x ** 2).sum())
        self.assertTrue(torch.equal(x.grad, torch.tensor([2.0, 4.0])))

    def test_non_finite_root(self):
        x = torch.tensor(1.0, requires_grad=True)
        with self.assertRaises(NumericalFault):
            forward_backward(x * float("nan"))

    def test_infinite_leaf_gradient(self):
        x = torch.tensor(0.0, requires_grad=True)
        with self.assertRaises(NumericalFault) as context:
            forward_backward(torch.sqrt(x), leaves={"x": x})
        self.assertEqual(context.exception.op_name, "grad:x")

    def test_root_must_be_scalar(self):
        x = torch.ones(2, requires_grad=True)
        with self.assertRaises(ContractViolation):
            forward_backward(x * 2.0)


class ModeTest(unittest.TestCase):
    def test_verification_mode_restores_dtype(self):
        before = torch.get_default_dtype()
        with verification_mode():
            self.assertTrue(is_verification_mode())
            self.assertEqual(torch.get_default_dtype(), torch.float64)
        self.assertFalse(is_verification_mode())
        self.assertEqual(torch.get_default_dtype(), before)


class LineSearchTest(unittest.TestCase):
    def test_history_is_monotone(self):
        p = torch.tensor([3.0, -2.0], dtype=torch.float64, requires_grad=True)
        history = line_search_descent(lambda: ((p - 1.0) ** 2).sum(), [p], 50)
        for earlier, later in zip(history, history[1:]):
            self.assertLessEqual(later, earlier)
        self.assertLess(history[-1], 1e-12)
