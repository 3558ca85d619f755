// SPDX-License-Identifier: Apache-2.0
#include "fimlab/tokenizer.hpp"

namespace fimlab {

namespace {

// Original prose; the order-2 statistics of this text drive the synthetic corpus.
constexpr std::string_view kSeedText =
    R"seed(The river came down from the hills in the early spring, carrying with it the gray water of the melting snow and the broken branches of the winter storms. Along its banks the people of the valley had built their houses of stone and timber, low and wide, with roofs of slate that shone like the backs of fish when the rain had passed. In the mornings the women went down to the water with baskets of linen, and the children followed them, throwing pebbles and shouting at the herons that stood motionless in the shallows.
)seed"
    R"seed(There was a mill at the bend of the river, and the miller was an old man named Thomas Hale, who had kept the wheel turning for more than forty years. He knew every sound the machinery made, the creak of the axle, the thump of the paddles, the long sigh of the stones as they ground the grain into flour. When a farmer brought him a cart of wheat he would take a handful from the sack, rub it between his palms, and tell the man how the summer had been on his fields without asking a single question.
)seed"
    R"seed(In the evenings the travellers gathered at the inn by the bridge. They were merchants and drovers, soldiers going home from distant wars, and now and then a scholar with a satchel of books and a face that had not seen much sun. The landlady, a broad woman with quick hands, served them bread and cheese and a dark ale that was brewed in the cellar, and she listened to their stories with the patience of someone who had heard every kind of story before.
)seed"
    R"seed(It was in the autumn of that year that the stranger arrived. He came on foot, without a horse or a pack, wearing a long coat that had once been blue and boots that had walked a great many miles. He asked for a room and paid for a week in advance with coins that none of them had ever seen, heavy and yellow, stamped with the head of a king whose name was worn away. He said very little at supper, but he watched the fire, and when the others had gone to bed he sat alone by the hearth until the last of the embers turned to ash.
)seed"
    R"seed(The next day he walked along the river to the mill. Thomas Hale was mending a sack at the door, and he looked up as the stranger approached, shading his eyes against the low sun. They spoke for a long while, though nobody heard what was said, and afterwards the miller seemed quieter than usual, as if he were turning over some question that would not let him rest.
)seed"
    R"seed(Winter came early. The first frost silvered the meadows in the middle of October, and by November the river had begun to freeze at the edges, so that the water moved slowly beneath a skin of clear ice. The stranger stayed on at the inn, paying each week with another of his yellow coins, and the landlady stopped asking where they came from. He spent his days walking the hills and his evenings writing in a small book bound in leather, which he kept always in the pocket of his coat.
)seed"
    R"seed(Some of the children followed him on his walks, at a distance, pretending to be hunting rabbits or looking for birds. They reported that he stopped often to look at the stones by the path, and that he would kneel and scrape away the moss with his knife, and copy something into his book. Once they saw him stand for an hour on the top of the highest hill, looking north toward the mountains, with his hands folded behind his back and the wind pulling at his coat.
)seed"
    R"seed(The schoolmaster, who was a curious man and not easily discouraged, invited the stranger to his house one evening and asked him plainly what he was looking for. The stranger smiled and said that he was looking for the road his grandfather had taken, a road that was older than the valley, older than the river in its present course, and that the marks of it could still be found by anyone who knew how to read them. The schoolmaster asked whether the road led anywhere worth going. The stranger said that he did not know, and that this was precisely why he wished to find it.
)seed"
    R"seed(In December a great storm came over the mountains. For three days the snow fell without stopping, and the wind drove it into drifts so deep that the doors of the houses could not be opened. The river froze from bank to bank. The people of the valley stayed by their fires, burning the wood they had gathered in the summer and counting the sacks of flour in their cellars, and they told one another that no storm in living memory had been so fierce.
)seed"
    R"seed(When at last the sky cleared and the sun came out over the white hills, the stranger was gone. His room at the inn was empty and tidy, the bed made, the fire laid ready for lighting. On the table he had left a small pile of the yellow coins and a folded sheet of paper. The landlady could not read, so she carried the paper to the schoolmaster, who opened it by his window and read it aloud to the little crowd that had gathered at his door.
)seed"
    R"seed(It said only that the road had been found, and that the writer was grateful for the hospitality of the valley, and that if anyone wished to follow him they should go to the mill and ask the miller to show them the stone beneath the wheel. The schoolmaster folded the letter and looked at the faces around him. Then, without a word, he put on his coat and began to walk toward the river, and one by one the others followed him through the snow.
)seed"
    R"seed(Thomas Hale was waiting for them at the door of the mill. He had lit a lantern, though it was still bright day, and he held it up as they came near, so that the light fell on the frozen wheel and the dark water moving under the ice. He told them that his father had shown him the stone when he was a boy, and that he had promised never to speak of it unless someone came asking. Now someone had asked, and the promise was kept, and he would show them what there was to see.
)seed"
    R"seed(Beneath the wheel, half hidden by the ice, was a flat gray stone as wide as a cart. Carved into its surface were lines and figures, worn smooth by the water, so faint that they could only be seen when the lantern was held close and at an angle. The schoolmaster knelt and traced them with his finger. They were not letters in any alphabet he knew, but they were arranged in rows like writing, and at the end of the last row there was a single mark that looked like an arrow pointing north.
)seed"
    R"seed(Nobody followed the arrow that winter. The snow lay deep on the hills until March, and when it melted the river rose and covered the stone again, and the mill wheel turned, and the work of the spring took up all their days. But the children remembered, and years later, when they were grown, some of them went north into the mountains with packs on their backs and the old man's lantern in their hands. What they found there is another story, and it has been told many times, though never twice in the same way.
)seed"
    R"seed(Accounts of the harvest were kept in a ledger at the granary, in columns for wheat, barley, oats and rye, with the weights entered in pounds and the prices in shillings and pence. In a good year the granary was full by the end of September, and the surplus was carried by barge down the river to the market towns, where it fetched a fair price from the bakers and the brewers. In a poor year the ledger showed more debts than credits, and the families of the valley tightened their belts and waited for better weather.
)seed"
    R"seed(The market towns were noisy places, crowded with stalls and carts and animals, where a man could buy anything from a bolt of silk to a barrel of salted herring. Hawkers cried their wares from dawn until dusk, and pickpockets moved through the crowds with quick and careful fingers. The travellers from the valley kept close together and held their purses tightly, and they were always glad to see the hills again when they turned for home.
)seed"
    R"seed(Letters arrived only twice a month, brought up the valley road by a carrier with a wagon and two tired horses. The carrier was a cheerful fellow who knew everyone by name and who carried, along with the letters, every scrap of gossip from every village between the coast and the mountains. People said that he could tell you the price of bread in the capital and the name of the newest baby in the smallest hamlet, and that he was wrong about both no more than half the time.
)seed";

}  // namespace

std::string_view packaged_seed_text() { return kSeedText; }

}  // namespace fimlab
