"""cotforge: synthesize code problems, execution-verified chain-of-thought
traces, and step-wise preference pairs for SFT / step-DPO training."""

from .backend import (
    BackendPolicy,
    CompletionRequest,
    CompletionResponse,
    HttpBackend,
    Message,
    MockBackend,
    fingerprint_request,
)
from .model import (
    CodeProblem,
    CotTrace,
    Segment,
    StepUnit,
    TestCase,
    TokenBudget,
    Verdict,
    count_tokens,
    extract_last_code_block,
    parse_cot,
    serialize_cot,
)
from .tree import PreferencePair, ReasoningNode, ReasoningTree, SearchConfig

__version__ = "0.1.0"

__all__ = [
    "BackendPolicy",
    "CodeProblem",
    "CompletionRequest",
    "CompletionResponse",
    "CotTrace",
    "HttpBackend",
    "Message",
    "MockBackend",
    "PreferencePair",
    "ReasoningNode",
    "ReasoningTree",
    "SearchConfig",
    "Segment",
    "StepUnit",
    "TestCase",
    "TokenBudget",
    "Verdict",
    "count_tokens",
    "extract_last_code_block",
    "fingerprint_request",
    "parse_cot",
    "serialize_cot",
    "__version__",
]
