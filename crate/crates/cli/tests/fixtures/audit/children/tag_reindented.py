"""Message-passing processor for graph algorithm tasks."""
import torch
from torch import nn


class Processor(nn.Module):
    def __init__(self, hidden: int = 128):
        super().__init__()
        self.hidden = hidden
        # <SPARK:OPERATOR>
        self.msg = nn.Linear(2 * hidden, hidden)
        self.upd = nn.GRUCell(hidden, hidden)
        self.norm = nn.LayerNorm(hidden)
        # </SPARK:OPERATOR>

    def forward(self, node_fts, edge_fts, adj):
        h = node_fts
    # <SPARK:ACTION>
        pair = torch.cat([h.unsqueeze(2).expand(-1, -1, h.size(1), -1),
                          h.unsqueeze(1).expand(-1, h.size(1), -1, -1)], dim=-1)
        m = self.msg(pair) + edge_fts
        m = m.masked_fill(adj.unsqueeze(-1) == 0, float("-inf")).amax(dim=2)
        m = torch.nan_to_num(m, neginf=0.0)
        h = self.norm(self.upd(m.flatten(0, 1), h.flatten(0, 1)).view_as(h))
        # </SPARK:ACTION>
        return h


def build(hidden: int = 128) -> Processor:
    return Processor(hidden)
