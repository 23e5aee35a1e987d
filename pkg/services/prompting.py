"""Prompt templates (stored verbatim under prompts/) and prompt encoding."""
import os
from enum import Enum
from functools import lru_cache
from typing import List

PROMPTS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'prompts')

COT_TEMPLATE = 'cot.txt'
DENSE_REWRITE_TEMPLATE = 'dense_rewrite.txt'
DENSE_INFERENCE_TEMPLATE = 'dense_inference.txt'


class PromptStyle(str, Enum):
    COT = 'cot'
    DENSE = 'dense'


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    """Read a template asset, dropping the file's final newline."""
    with open(os.path.join(PROMPTS_DIR, name), 'r', encoding='utf-8') as f:
        text = f.read()
    return text[:-1] if text.endswith('\n') else text


def format_cot_prompt(question: str, style: PromptStyle = PromptStyle.COT) -> str:
    """
    Chain-of-thought prompt for a question.

    The dense style prepends the inference-time dense-reasoning instruction
    to the same chain-of-thought prompt.
    """
    prompt = load_template(COT_TEMPLATE).replace('{{problem}}', question)
    if PromptStyle(style) == PromptStyle.DENSE:
        prompt = load_template(DENSE_INFERENCE_TEMPLATE) + '\n\n' + prompt
    return prompt


def format_rewrite_prompt(question: str, original_resp: str) -> str:
    return (
        load_template(DENSE_REWRITE_TEMPLATE)
        .replace('{question}', question)
        .replace('{original_resp}', original_resp)
    )


def encode_prompt(tokenizer, text: str) -> List[int]:
    """BOS followed by the prompt bytes."""
    return [tokenizer.bos_id] + tokenizer.tokenize(text)


def encode_question(tokenizer, question: str, bare: bool = False,
                    style: PromptStyle = PromptStyle.COT) -> List[int]:
    """Prompt ids for a question: the CoT template, or the bare question if ``bare``."""
    return encode_prompt(tokenizer, question if bare else format_cot_prompt(question, style))
