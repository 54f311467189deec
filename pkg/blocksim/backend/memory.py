from typing import Dict

from blocksim.core import blocks_needed


class MemoryManager:
    """
    Paged KV-cache accounting by block counts

    free_blocks + sum(held) == total_blocks at all times.
    """

    def __init__(self, total_blocks: int, block_size: int) -> None:
        self.total_blocks = total_blocks
        self.block_size = block_size
        self.free_blocks = total_blocks
        self.held: Dict[int, int] = {}

    def blocks_for(self, tokens: int) -> int:
        return blocks_needed(tokens, self.block_size)

    def extra_blocks(self, request_id: int, tokens: int) -> int:
        """Blocks to allocate so that {request_id} can hold {tokens}"""
        return max(0, blocks_needed(tokens, self.block_size) - self.held.get(request_id, 0))

    def grow_to(self, request_id: int, tokens: int) -> int:
        """
        Allocate blocks up to blocks_needed({tokens})

        :raise ValueError if not enough free blocks; callers check before growing
        """
        extra = self.extra_blocks(request_id, tokens)
        if extra > self.free_blocks:
            raise ValueError(
                f"request {request_id} needs {extra} blocks, {self.free_blocks} free"
            )
        if extra:
            self.held[request_id] = self.held.get(request_id, 0) + extra
            self.free_blocks -= extra
        return extra

    def release(self, request_id: int) -> int:
        blocks = self.held.pop(request_id, 0)
        self.free_blocks += blocks
        return blocks

    def is_consistent(self) -> bool:
        return self.free_blocks + sum(self.held.values()) == self.total_blocks
