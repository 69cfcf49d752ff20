"""Differentiable-array substrate.

Every trainable quantity in splatcam is a ``torch.Tensor`` (aliased here as ``DiffTensor``) and
gradients come from torch's reverse-mode tape. This module adds what the tape does not give us
out of the box:

* a 64-bit *verification mode* and a bit-deterministic mode,
* ``forward_backward`` which turns NaN/Inf into a ``NumericalFault`` naming the offending op,
* a registry of differentiable primitives together with input samplers, and
* a central-difference gradient checker producing ``GradCheckReport`` rows.
"""

import contextlib
import logging
import random
import re
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ContractViolation, HarnessError, NumericalFault

logger = logging.getLogger(__name__)

DiffTensor = torch.Tensor

TRAIN_DTYPE = torch.float32
VERIFY_DTYPE = torch.float64
DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4

_STATE = {"verification": False, "deterministic": False}


# ==========================================
# 1. Modes
# ==========================================

def is_verification_mode():
    return _STATE["verification"]


def is_deterministic_mode():
    return _STATE["deterministic"]


@contextlib.contextmanager
def deterministic_mode(enabled=True):
    """Fixed reduction order: deterministic kernels on, benchmark autotuning off."""
    previous = (_STATE["deterministic"], torch.are_deterministic_algorithms_enabled(),
                torch.backends.cudnn.benchmark)
    _STATE["deterministic"] = enabled
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    torch.backends.cudnn.benchmark = not enabled
    try:
        yield
    finally:
        _STATE["deterministic"] = previous[0]
        torch.use_deterministic_algorithms(previous[1], warn_only=True)
        torch.backends.cudnn.benchmark = previous[2]


@contextlib.contextmanager
def verification_mode():
    """64-bit arithmetic end to end, deterministic kernels."""
    previous_dtype = torch.get_default_dtype()
    previous = _STATE["verification"]
    _STATE["verification"] = True
    torch.set_default_dtype(VERIFY_DTYPE)
    try:
        with deterministic_mode(True):
            yield
    finally:
        torch.set_default_dtype(previous_dtype)
        _STATE["verification"] = previous


def seed_everything(seed):
    """Seed every RNG we touch and hand back a dedicated torch generator."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def working_dtype():
    return VERIFY_DTYPE if is_verification_mode() else torch.get_default_dtype()


def diff_tensor(values, *, requires_grad=False, verification=False):
    """Build a DiffTensor with the dtype policy of the current mode."""
    dtype = VERIFY_DTYPE if verification else working_dtype()
    tensor = torch.as_tensor(values, dtype=dtype).clone()
    return tensor.requires_grad_(requires_grad)


# ==========================================
# 2. Forward / backward with fault reporting
# ==========================================

_ANOMALY_PATTERN = re.compile(r"Function '(\w+)' returned nan")


def _op_name(tensor):
    return type(tensor.grad_fn).__name__ if tensor.grad_fn is not None else "leaf"


def ensure_finite(tensor, op_name, diagnostics=None):
    if not torch.isfinite(tensor).all():
        raise NumericalFault(op_name, diagnostics=diagnostics)
    return tensor


def forward_backward(root, *, leaves=None, detect_faults=True):
    """Back-propagate a scalar root into every trainable leaf.

    Gradients accumulate across calls (torch semantics); clear them between steps.
    ``leaves`` is an optional mapping name -> tensor whose gradients are checked for
    Inf after the pass (anomaly mode only catches NaN).
    """
    if root.numel() != 1:
        raise ContractViolation(f"backward root must be a scalar, got shape {tuple(root.shape)}")
    ensure_finite(root.detach(), _op_name(root))
    if not root.requires_grad:
        logger.debug("backward on a constant root: no trainable leaves reached")
        return root

    anomaly = torch.autograd.detect_anomaly(check_nan=True) if detect_faults else contextlib.nullcontext()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with anomaly:
                root.reshape(()).backward()
    except RuntimeError as exc:
        match = _ANOMALY_PATTERN.search(str(exc))
        if match:
            raise NumericalFault(match.group(1), "non-finite gradient") from exc
        raise

    for name, leaf in (leaves or {}).items():
        if leaf.grad is not None and not torch.isfinite(leaf.grad).all():
            raise NumericalFault(f"grad:{name}", "non-finite gradient")
    return root


# ==========================================
# 3. Primitive registry
# ==========================================

@dataclass(frozen=True)
class Primitive:
    name: str
    fn: Callable[..., torch.Tensor]
    sample: Callable[[torch.Generator], tuple]
    exclusion: str = ""


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name, *, sample, exclusion=""):
    """Decorator: register ``fn`` for gradient checking with an input sampler.

    ``sample(generator)`` must return a tuple of 64-bit inputs drawn away from the
    non-smooth points documented in ``exclusion``.
    """
    def decorator(fn):
        if name in PRIMITIVES and PRIMITIVES[name].fn is not fn:
            logger.debug("re-registering primitive %s", name)
        PRIMITIVES[name] = Primitive(name, fn, sample, exclusion)
        return fn
    return decorator


# ==========================================
# 4. Gradient checking
# ==========================================

@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_relative_error: float
    element_count: int
    passed: bool
    tolerance: float = DEFAULT_TOL

    def as_dict(self):
        return {
            "op": self.op_name,
            "max_relative_error": self.max_relative_error,
            "elements": self.element_count,
            "pass": self.passed,
        }


def _probe_indices(count, max_elements, generator):
    if max_elements is None or count <= max_elements:
        return range(count)
    return torch.randperm(count, generator=generator)[:max_elements].tolist()


def _central_difference_check(closure, tensors, name, eps, tol, generator, max_elements):
    first = closure()
    with torch.no_grad():
        second = closure()
    if not torch.equal(first.detach(), second):
        raise HarnessError(f"'{name}' is not deterministic under a fixed seed")

    generator = generator or torch.Generator().manual_seed(0)
    weights = torch.randn(first.shape, generator=generator, dtype=first.dtype)
    objective = (first * weights).sum()
    analytic = torch.autograd.grad(objective, tensors, allow_unused=True)

    worst = 0.0
    count = 0
    with torch.no_grad():
        for tensor, grad in zip(tensors, analytic):
            grad = torch.zeros_like(tensor) if grad is None else grad
            flat = tensor.view(-1)
            flat_grad = grad.reshape(-1)
            for index in _probe_indices(flat.numel(), max_elements, generator):
                original = flat[index].item()
                flat[index] = original + eps
                plus = (closure() * weights).sum().item()
                flat[index] = original - eps
                minus = (closure() * weights).sum().item()
                flat[index] = original
                numeric = (plus - minus) / (2.0 * eps)
                error = abs(flat_grad[index].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, error)
                count += 1

    report = GradCheckReport(name, worst, count, worst < tol, tol)
    logger.debug("grad_check %s: max rel err %.3e over %d elements", name, worst, count)
    return report


def grad_check(op, inputs, *, eps=DEFAULT_EPS, tol=DEFAULT_TOL, name=None,
               generator=None, max_elements=None):
    """Compare analytic gradients of ``op(*inputs)`` against central differences.

    The relative error of one element is |analytic - numeric| / max(1, |numeric|); the report
    carries the maximum over every probed element of every floating-point input.
    Runs in 64-bit verification mode.
    """
    name = name or getattr(op, "__name__", "op")
    with verification_mode():
        probes = []
        for value in inputs:
            if isinstance(value, torch.Tensor) and value.is_floating_point():
                value = value.detach().to(VERIFY_DTYPE).clone().requires_grad_(True)
            probes.append(value)
        tensors = [p for p in probes if isinstance(p, torch.Tensor) and p.requires_grad]
        if not tensors:
            raise HarnessError(f"'{name}' has no floating-point inputs to check")
        return _central_difference_check(lambda: op(*probes), tensors, name, eps, tol,
                                         generator, max_elements)


def grad_check_parameters(closure, parameters, *, eps=DEFAULT_EPS, tol=DEFAULT_TOL,
                          name="parameters", generator=None, max_elements=None):
    """Gradient-check a closure with respect to already-64-bit parameter tensors.

    ``parameters`` is an iterable of tensors (e.g. ``module.parameters()`` after ``.double()``);
    ``max_elements`` caps the probes per tensor for large models.
    """
    tensors = [p for p in parameters if p.requires_grad]
    if any(t.dtype != VERIFY_DTYPE for t in tensors):
        raise HarnessError("parameter gradient checks need 64-bit parameters")
    with verification_mode():
        return _central_difference_check(closure, tensors, name, eps, tol, generator, max_elements)


def check_primitive(name, seeds=range(10), *, eps=DEFAULT_EPS, tol=DEFAULT_TOL):
    """Run ``grad_check`` on a registered primitive once per seed."""
    try:
        primitive = PRIMITIVES[name]
    except KeyError:
        raise HarnessError(f"unknown primitive '{name}'") from None
    reports = []
    for seed in seeds:
        generator = torch.Generator().manual_seed(seed)
        with verification_mode():
            inputs = primitive.sample(generator)
        reports.append(grad_check(primitive.fn, inputs, eps=eps, tol=tol, name=name,
                                  generator=generator))
    return reports


# ==========================================
# 5. Monotone descent (toy fits, photometric alignment)
# ==========================================

def line_search_descent(loss_fn, params, steps, *, initial_step=1.0, max_step=1e3,
                        shrink=0.5, armijo=1e-4, max_halvings=60):
    """Backtracking gradient descent; the returned loss history never increases.

    ``loss_fn()`` must rebuild the loss from ``params`` on every call.
    """
    params = list(params)
    history = []
    step_size = initial_step
    loss = loss_fn()
    for _ in range(steps):
        history.append(loss.item())
        grads = torch.autograd.grad(loss, params)
        squared = sum(float((g * g).sum()) for g in grads)
        if squared == 0.0:
            break
        accepted = False
        with torch.no_grad():
            originals = [p.detach().clone() for p in params]
            trial_step = step_size
            for _ in range(max_halvings):
                for param, original, grad in zip(params, originals, grads):
                    param.copy_(original - trial_step * grad)
                trial = loss_fn().item()
                if trial <= history[-1] - armijo * trial_step * squared:
                    accepted = True
                    break
                trial_step *= shrink
            if not accepted:
                for param, original in zip(params, originals):
                    param.copy_(original)
        if not accepted:
            break
        step_size = min(trial_step * 2.0, max_step)
        loss = loss_fn()
    history.append(loss_fn().item())
    return history


# ==========================================
# 6. Registered substrate primitives
# ==========================================

def _sample_vector(size, scale=1.0):
    def sample(generator):
        return (scale * torch.randn(size, generator=generator, dtype=VERIFY_DTYPE),)
    return sample


@register_primitive("softmax", sample=_sample_vector(8))
def softmax(x):
    return torch.softmax(x, dim=-1)


@register_primitive("layer_norm", sample=_sample_vector((3, 8)))
def layer_norm(x):
    return F.layer_norm(x, x.shape[-1:])


@register_primitive("gelu", sample=_sample_vector(16, scale=2.0))
def gelu(x):
    return F.gelu(x)
