# Geometric and semantic streams plus the pipeline that hosts them
