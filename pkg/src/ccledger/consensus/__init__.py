from .raft import (
    AppendEntries,
    AppendEntriesReply,
    LogRecord,
    Message,
    RaftNode,
    RequestVote,
    RequestVoteReply,
    Role,
    decode_message,
    encode_message,
)
from .storage import FileRaftStorage, MemoryRaftStorage
from .sim import SimNetConfig, Trace, run_simulation

__all__ = [
    "AppendEntries",
    "AppendEntriesReply",
    "FileRaftStorage",
    "LogRecord",
    "MemoryRaftStorage",
    "Message",
    "RaftNode",
    "RequestVote",
    "RequestVoteReply",
    "Role",
    "SimNetConfig",
    "Trace",
    "decode_message",
    "encode_message",
    "run_simulation",
]
