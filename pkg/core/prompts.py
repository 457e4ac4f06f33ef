"""
Промпты построения шаблонов, текстовой обратной связи и редактирования шаблона.
Все функции чистые: одинаковые входы дают одинаковые байты
"""

import json
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from .exceptions import PreconditionError
from .store import ThoughtTemplate

NOT_PROVIDED = "(not provided)"

METRIC_LABELS = {
    'f1': 'F1',
    'em': 'EM',
    'accuracy': 'Accuracy',
}

DECISION_TOKENS = ('**FIX**', '**DISCARD**', '**ADD**', '**KEEP**')


CONSTRUCTION_INSTRUCTIONS = (
    "You are an expert in reasoning strategies. Given a complex, multi-step problem, its complete solution, "
    "and the final answer, extract a structured problem-solving template composed of reusable sub-templates. "
    "Return the result in JSON format with the following structure:\n"
    "\n"
    "1. A clear name for the strategy (template_name)\n"
    "2. A brief description of the method (description)\n"
    "3. A step-by-step reasoning flow to solve similar problems (reason_flow)\n"
    "4. An example application, including:\n"
    "   - Problem statement (example_problem)\n"
    "   - Solution steps (solution_steps)\n"
    "   - Final answer (final_answer)\n"
    "5. sub_templates: A list of dictionaries, each representing a reasoning sub-template with:\n"
    "   - template_name: A descriptive name for this sub-strategy\n"
    "   - description: A brief description of the sub-strategy\n"
    "   - reason_flow: A list of reasoning steps involved in this sub-task\n"
    "   - example: An example application of this sub-template, including:\n"
    "     - example_problem: A question matching this reasoning pattern\n"
    "     - solution_steps: Step-by-step solution to that question\n"
    "     - final_answer: The answer to that question\n"
    "\n"
    "Respond only in JSON format with no explanation.\n"
)

FEEDBACK_TASK = (
    "Your task. Analyze the template's role in the prediction error:\n"
    "- How the template led to the incorrect prediction\n"
    "- What needs to be fixed in the template\n"
    "- Specific feedback to get the correct answer\n"
    "\n"
    "Decision Guide (choose exactly one at the end).\n"
    "- FIX – Template needs revision to address the issues above\n"
    "- DISCARD – Template is fundamentally incorrect\n"
    "- KEEP – Template works perfectly AND failure is due to external factors (e.g., answer format)\n"
    "- ADD – Template works perfectly BUT failure is due to system coordination issues "
    "(e.g., selection, multi-step integration)\n"
    "\n"
    "Output format.\n"
    "- Return bullets only for your analysis.\n"
    "- On the FINAL LINE, output exactly one of: **FIX** or **DISCARD** or **ADD** or **KEEP**."
)

EDIT_SCHEMA = (
    '{\n'
    '  "template_id": "string",\n'
    '  "template_name": "string",\n'
    '  "description": "string",\n'
    '  "reason_flow": ["string", "..."],\n'
    '  "example": {\n'
    '    "example_problem": "string",\n'
    '    "solution_steps": ["string", "..."],\n'
    '    "final_answer": "string"\n'
    '  }\n'
    '}'
)

EDIT_HEADER = (
    "Role. You will edit a reasoning template based on the FEEDBACK.\n"
    "\n"
    "Output constraints.\n"
    "- Return ONLY a valid JSON object matching the SCHEMA below.\n"
    "- No markdown, no extra text. Use double quotes for all keys/strings.\n"
    "\n"
    "SCHEMA.\n"
)

EDIT_INSTRUCTION = (
    "Revise the template to address the FEEDBACK while preserving reusable structure and staying "
    "within the SCHEMA. Respond only with the JSON object."
)


@dataclass(frozen=True)
class FailedCase:
    """Запрос, на котором шаблон применялся и ответ оказался неверным"""
    query: str
    trace: str
    gold_answers: Tuple[str, ...]
    prediction: str
    metric_value: float
    metric: str = 'f1'


@dataclass(frozen=True)
class SourceCase:
    """Обучающая тройка, из которой был построен шаблон"""
    problem: str
    solution: Optional[Tuple[str, ...]]
    answer: str


def _solution_block(solution: Optional[Sequence[str]]) -> str:
    if not solution:
        return NOT_PROVIDED
    return '\n'.join(solution)


def render_construction_prompt(problem: str, solution: Optional[Sequence[str]], answer: str) -> str:
    if not problem or not answer:
        raise PreconditionError("Construction prompt needs a non-empty problem and answer")
    return (
        CONSTRUCTION_INSTRUCTIONS
        + "\n"
        + f'Problem:\n""" {problem} """\n'
        + "\n"
        + f'Solution:\n""" {_solution_block(solution)} """\n'
        + "\n"
        + f'Final Answer:\n""" {answer} """\n'
    )


def template_dump(template: ThoughtTemplate) -> str:
    return json.dumps(template.to_dict(), ensure_ascii=False, indent=2)


def _render_case(index: int, case: FailedCase) -> str:
    label = METRIC_LABELS.get(case.metric, case.metric)
    return (
        f"Case #{index} ({label}: {case.metric_value})\n"
        f"Query: {case.query}\n"
        f"REASONING TRACE: {case.trace}\n"
        f"Gold: {', '.join(case.gold_answers)}\n"
        f"Pred: {case.prediction}"
    )


def _render_source(source: SourceCase) -> str:
    return (
        f"Query: {source.problem}\n"
        f"Solution Steps:\n"
        f"{_solution_block(source.solution)}\n"
        f"Final Answer: {source.answer}"
    )


def _shared_blocks(template: ThoughtTemplate, failed_cases: Sequence[FailedCase],
                   source_case: SourceCase, cases_heading: str) -> str:
    if not failed_cases:
        raise PreconditionError(f"At least one failed case is required for {template.template_id}")
    cases = '\n\n'.join(_render_case(index, case) for index, case in enumerate(failed_cases))
    return (
        "Current Template.\n"
        f"{template_dump(template)}\n"
        "\n"
        f"{cases_heading}\n"
        f"{cases}\n"
        "\n"
        "Failed Case Source (original query/solution/answer).\n"
        f"{_render_source(source_case)}\n"
    )


def render_feedback_prompt(template: ThoughtTemplate, failed_cases: Sequence[FailedCase],
                           source_case: SourceCase) -> str:
    return (
        "Role. You are improving a reasoning template where it was applied.\n"
        "\n"
        + _shared_blocks(template, failed_cases, source_case, "Failed Cases where this template was used.")
        + "\n"
        + FEEDBACK_TASK
        + "\n"
    )


def render_edit_prompt(template: ThoughtTemplate, failed_cases: Sequence[FailedCase],
                       source_case: SourceCase, feedback_text: str) -> str:
    return (
        EDIT_HEADER
        + EDIT_SCHEMA
        + "\n\n"
        + _shared_blocks(template, failed_cases, source_case, "Failed Cases (referenced in feedback).")
        + "\n"
        + "FEEDBACK.\n"
        + f"{feedback_text.strip()}\n"
        + "\n"
        + EDIT_INSTRUCTION
        + "\n"
    )
