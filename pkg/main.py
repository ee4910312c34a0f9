from dotenv import load_dotenv

from lodfm.__main__ import main

# 加载环境变量（LODFM_SPARQL_ENDPOINT、LODFM_CACHE_DIR 等）
load_dotenv()

if __name__ == "__main__":
    main()
