"""
Batch formation for the two local scheduler policies

Planners are built from the instance state and called to produce a plan:

>>> from blocksim.core import InstanceConfig, Request
>>> from blocksim.backend.memory import MemoryManager
>>> config = InstanceConfig()
>>> head = Request(id=1, prompt_tokens=1200, true_output_tokens=10,
...                estimated_output_tokens=10, arrival_time=0.0)
>>> plan = ChunkedPrefillPlanner(config, MemoryManager(1056, 16), [], [head])()
>>> plan.prefill_segments
((1, 512),)
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

from blocksim.backend.memory import MemoryManager
from blocksim.core import InstanceConfig, Request
from blocksim.errors import EmptyPlan

PrefillSegment = Tuple[int, int]


@dataclass(frozen=True)
class BatchPlan:
    """
    Composition of one execution step

    new_ids are the prefill segments admitted from the waiting queue by this plan.
    """

    decode_ids: Tuple[int, ...] = ()
    prefill_segments: Tuple[PrefillSegment, ...] = ()
    total_prefill_tokens: int = 0
    context_tokens: int = 0
    new_ids: Tuple[int, ...] = ()

    @property
    def signature(self) -> Tuple[int, int, int]:
        """Batch size and token counts the cost model depends on"""
        return len(self.decode_ids), self.total_prefill_tokens, self.context_tokens

    @property
    def is_empty(self) -> bool:
        return not self.decode_ids and not self.prefill_segments

    def member_ids(self) -> Tuple[int, ...]:
        return self.decode_ids + tuple(request_id for request_id, _ in self.prefill_segments)


def tokens_after_chunk(request: Request, chunk: int) -> int:
    """Cached tokens after prefilling {chunk} more; completing the prompt yields one token"""
    progress = request.prefill_progress + chunk
    first_token = 1 if progress == request.prompt_tokens and request.decoded_tokens == 0 else 0
    return progress + request.decoded_tokens + first_token


def tokens_after_decode(request: Request) -> int:
    return request.prefill_progress + request.decoded_tokens + 1


def is_decode_ready(request: Request) -> bool:
    return request.prefill_progress == request.prompt_tokens and request.decoded_tokens >= 1


@dataclass
class ChunkedPrefillPlanner:
    """
    Stall-free hybrid batches

    Every decode-ready sequence takes one step and one budget token; the rest of the chunk
    budget goes to prefill chunks of partially prefilled running requests, then to the
    waiting queue head in FCFS order while batch slots and memory for the chunk allow.
    """

    config: InstanceConfig
    memory: MemoryManager
    running: Sequence[Request]
    waiting: Sequence[Request]
    admit_new: bool = True

    def __call__(self) -> BatchPlan:
        budget = self.config.chunk_budget
        decoders = [r for r in self.running if is_decode_ready(r)][:budget]
        budget -= len(decoders)
        reserved = sum(
            self.memory.extra_blocks(r.id, tokens_after_decode(r)) for r in decoders
        )

        segments: List[PrefillSegment] = []
        for request in self.running:
            if budget <= 0:
                break
            remaining = request.prompt_tokens - request.prefill_progress
            if remaining <= 0:
                continue
            chunk = min(remaining, budget)
            segments.append((request.id, chunk))
            budget -= chunk
            reserved += self.memory.extra_blocks(request.id, tokens_after_chunk(request, chunk))

        new_ids: List[int] = []
        if self.admit_new:
            free = self.memory.free_blocks - reserved
            slots = self.config.max_batch_size - len(self.running)
            for request in self.waiting:
                if budget <= 0 or slots <= 0:
                    break
                chunk = min(request.prompt_tokens - request.prefill_progress, budget)
                needed = self.memory.blocks_for(tokens_after_chunk(request, chunk))
                if needed > free:
                    break
                segments.append((request.id, chunk))
                new_ids.append(request.id)
                budget -= chunk
                free -= needed
                slots -= 1

        return _build_plan(decoders, segments, new_ids)


@dataclass
class PrefillPriorityPlanner:
    """
    Legacy prefill-first batches

    Whenever waiting requests fit, a pure-prefill plan of as many full prompts as batch
    slots and memory allow is emitted and running decoders stall; otherwise all running
    sequences decode.
    """

    config: InstanceConfig
    memory: MemoryManager
    running: Sequence[Request]
    waiting: Sequence[Request]
    admit_new: bool = True

    def __call__(self) -> BatchPlan:
        if self.admit_new and self.waiting:
            free = self.memory.free_blocks
            slots = self.config.max_batch_size - len(self.running)
            segments: List[PrefillSegment] = []
            new_ids: List[int] = []
            for request in self.waiting:
                if slots <= 0:
                    break
                chunk = request.prompt_tokens - request.prefill_progress
                needed = self.memory.blocks_for(tokens_after_chunk(request, chunk))
                if needed > free:
                    break
                segments.append((request.id, chunk))
                new_ids.append(request.id)
                free -= needed
                slots -= 1
            if segments:
                return _build_plan([], segments, new_ids)

        return _build_plan([r for r in self.running if is_decode_ready(r)], [], [])


def _build_plan(
    decoders: Sequence[Request], segments: Sequence[PrefillSegment], new_ids: Sequence[int]
) -> BatchPlan:
    """:raise EmptyPlan if nothing is runnable"""
    if not decoders and not segments:
        raise EmptyPlan()

    return BatchPlan(
        decode_ids=tuple(r.id for r in decoders),
        prefill_segments=tuple(segments),
        total_prefill_tokens=sum(chunk for _, chunk in segments),
        context_tokens=sum(r.prefill_progress + r.decoded_tokens for r in decoders),
        new_ids=tuple(new_ids),
    )
