# Query parsing, constraint scoring, visual audit and memory fusion
