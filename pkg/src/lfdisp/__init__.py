"""Light field disparity estimation toolkit."""
