# Shared helpers: reply parsing, geometry, mask encoding
